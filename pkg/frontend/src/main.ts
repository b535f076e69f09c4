// DOM wiring for the latent editor: one canvas, marker overlay, global
// transform sliders, stitch controls.  All mutations round-trip through the
// API and re-decode before the next frame is shown, so the image always
// matches the marker overlay's version.

import { ApiError, EditorApi, SetInfo } from "./api.js";
import { degreesToRadians, deltaToField, dividerToRegion, fieldToCanvas } from "./coords.js";
import { decodeBase64, parseP6 } from "./ppm.js";
import { EditorStore, makePreviewGate } from "./state.js";

const api = new EditorApi("");
const store = new EditorStore();

const canvas = document.getElementById("view") as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;
const setSelect = document.getElementById("set-select") as HTMLSelectElement;
const otherSelect = document.getElementById("other-select") as HTMLSelectElement;
const banner = document.getElementById("banner") as HTMLDivElement;
const txSlider = document.getElementById("tx") as HTMLInputElement;
const tySlider = document.getElementById("ty") as HTMLInputElement;
const thetaSlider = document.getElementById("theta") as HTMLInputElement;
const sliderReadout = document.getElementById("slider-readout") as HTMLSpanElement;
const dividerSlider = document.getElementById("divider") as HTMLInputElement;

let dragging: { index: number; startPx: [number, number]; pose: { tx: number; ty: number; theta: number } } | null = null;
const previewGate = makePreviewGate(200);

function showBanner(text: string, kind: "error" | "info") {
  banner.textContent = text;
  banner.className = kind;
  banner.style.display = text ? "block" : "none";
}

function markerRadius(): number {
  return Math.max(5, canvas.width / 60);
}

function render() {
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const frame = store.frame;
  const info = store.activeInfo();
  if (!frame || !info) {
    ctx.fillStyle = "#202025";
    ctx.fillRect(0, 0, canvas.width, canvas.height);
    ctx.fillStyle = "#aaa";
    ctx.font = "16px sans-serif";
    ctx.fillText("no latent set selected", 20, canvas.height / 2);
    return;
  }
  try {
    const ppm = parseP6(decodeBase64(frame.image));
    const off = document.createElement("canvas");
    off.width = ppm.width;
    off.height = ppm.height;
    off.getContext("2d")!.putImageData(new ImageData(ppm.rgba, ppm.width, ppm.height), 0, 0);
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
  } catch (err) {
    showBanner(`bad frame: ${(err as Error).message}`, "error");
    return; // keep the previous picture untouched
  }
  const size = { width: canvas.width, height: canvas.height };
  info.poses.forEach((pose, i) => {
    const [cx, cy] = fieldToCanvas(pose.tx, pose.ty, size);
    const r = markerRadius();
    ctx.beginPath();
    ctx.arc(cx, cy, r, 0, 2 * Math.PI);
    ctx.strokeStyle = "#ff5252";
    ctx.lineWidth = 2;
    ctx.stroke();
    ctx.beginPath();
    ctx.moveTo(cx, cy);
    ctx.lineTo(cx + 2 * r * Math.cos(pose.theta), cy + 2 * r * Math.sin(pose.theta));
    ctx.stroke();
    ctx.fillStyle = "#ff5252";
    ctx.font = "11px sans-serif";
    ctx.fillText(String(i), cx + r + 2, cy - r - 2);
  });
}

async function refetchDecode(name: string) {
  try {
    const decode = await api.decode(name, store.resolution, store.resolution);
    if (store.acceptFrame(name, decode)) render();
    showBanner("", "info");
  } catch (err) {
    if (err instanceof ApiError && err.status === 404) {
      store.selectSet(null);
      refreshSets();
    } else {
      showBanner(`decode failed: ${(err as Error).message}`, "error");
    }
  }
}

function dispatch(action: { kind: string; set?: string }) {
  if (action.kind === "refetch-decode" && action.set) refetchDecode(action.set);
  if (action.kind === "deselect") render();
}

async function refreshSets() {
  try {
    const sets = await api.listSets();
    store.readOnly = false;
    rebuildSelectors(sets);
    dispatch(store.applySets(sets));
    render();
  } catch {
    store.readOnly = true;
    showBanner("server unreachable: read-only mode", "error");
  }
}

function rebuildSelectors(sets: SetInfo[]) {
  for (const select of [setSelect, otherSelect]) {
    const current = select.value;
    select.innerHTML = "";
    for (const s of sets) {
      const option = document.createElement("option");
      option.value = s.name;
      option.textContent = `${s.name} (N=${s.N}, v${s.version})`;
      select.appendChild(option);
    }
    if (sets.some((s) => s.name === current)) select.value = current;
  }
}

async function commitMutation(start: () => Promise<{ name: string; version: number; warning?: string }>) {
  if (store.pendingEdits > 0) return; // at most one in-flight mutation
  store.pendingEdits += 1;
  try {
    const result = await start();
    if (result.warning) showBanner(result.warning, "info");
    dispatch(store.applyMutation(result.name, result.version));
    await refreshSets();
  } catch (err) {
    showBanner(`edit failed: ${(err as Error).message}`, "error");
    await refreshSets(); // revert markers to server-confirmed state
  } finally {
    store.pendingEdits -= 1;
  }
}

// -- marker dragging ---------------------------------------------------------

canvas.addEventListener("pointerdown", (ev) => {
  const info = store.activeInfo();
  if (!info || store.readOnly) return;
  const rect = canvas.getBoundingClientRect();
  const px = ((ev.clientX - rect.left) / rect.width) * canvas.width;
  const py = ((ev.clientY - rect.top) / rect.height) * canvas.height;
  const size = { width: canvas.width, height: canvas.height };
  info.poses.forEach((pose, i) => {
    const [cx, cy] = fieldToCanvas(pose.tx, pose.ty, size);
    if (Math.hypot(cx - px, cy - py) <= markerRadius() + 3) {
      dragging = { index: i, startPx: [px, py], pose: { ...pose } };
      canvas.setPointerCapture(ev.pointerId);
    }
  });
});

canvas.addEventListener("pointermove", (ev) => {
  if (!dragging) return;
  const rect = canvas.getBoundingClientRect();
  const px = ((ev.clientX - rect.left) / rect.width) * canvas.width;
  const py = ((ev.clientY - rect.top) / rect.height) * canvas.height;
  const [dx, dy] = deltaToField(px - dragging.startPx[0], py - dragging.startPx[1], {
    width: canvas.width,
    height: canvas.height,
  });
  const info = store.activeInfo();
  if (!info) return;
  info.poses[dragging.index] = {
    ...dragging.pose,
    tx: dragging.pose.tx + dx,
    ty: dragging.pose.ty + dy,
  };
  render(); // optimistic marker; image refreshes on release or preview tick
  if (previewGate() && store.activeSet && store.pendingEdits === 0) {
    api
      .moveLatent(store.activeSet, dragging.index, info.poses[dragging.index])
      .then((r) => dispatch(store.applyMutation(r.name, r.version)))
      .catch(() => {});
  }
});

canvas.addEventListener("pointerup", () => {
  if (!dragging || !store.activeSet) {
    dragging = null;
    return;
  }
  const info = store.activeInfo();
  if (info) {
    const index = dragging.index;
    const pose = info.poses[index];
    const name = store.activeSet;
    commitMutation(() => api.moveLatent(name, index, pose));
  }
  dragging = null;
});

// -- global transform and stitch ---------------------------------------------

function sliderValues() {
  return {
    tx: Number(txSlider.value),
    ty: Number(tySlider.value),
    theta: degreesToRadians(Number(thetaSlider.value)),
  };
}

for (const slider of [txSlider, tySlider, thetaSlider]) {
  slider.addEventListener("input", () => {
    const g = sliderValues();
    sliderReadout.textContent = `tx=${g.tx.toFixed(2)} ty=${g.ty.toFixed(2)} theta=${g.theta.toFixed(2)}`;
  });
}

document.getElementById("apply-transform")!.addEventListener("click", () => {
  if (!store.activeSet) return;
  const name = store.activeSet;
  commitMutation(() => api.transform(name, sliderValues()));
  txSlider.value = "0";
  tySlider.value = "0";
  thetaSlider.value = "0";
});

document.getElementById("apply-stitch")!.addEventListener("click", () => {
  if (!store.activeSet || !otherSelect.value) return;
  const region = dividerToRegion(Number(dividerSlider.value), {
    width: Number(dividerSlider.max),
    height: Number(dividerSlider.max),
  });
  const name = store.activeSet;
  commitMutation(() => api.stitch(name, otherSelect.value, region));
});

setSelect.addEventListener("change", () => {
  dispatch(store.selectSet(setSelect.value || null));
});

(document.getElementById("resolution") as HTMLSelectElement).addEventListener("change", (ev) => {
  store.resolution = Number((ev.target as HTMLSelectElement).value);
  if (store.activeSet) refetchDecode(store.activeSet);
});

// -- boot ---------------------------------------------------------------------

async function boot() {
  await refreshSets();
  const first = store.sets.keys().next();
  if (!first.done) {
    setSelect.value = first.value;
    dispatch(store.selectSet(first.value));
  }
  setInterval(refreshSets, 2500);
}

boot();
