// Editor state and version reconciliation, kept free of DOM concerns so the
// invariants are unit-testable: a frame is only ever accepted when its
// version matches the version the overlay believes in, and stale sets
// trigger refetches rather than renders.

import type { DecodeResponse, SetInfo } from "./api.js";

export interface Frame {
  version: number;
  width: number;
  height: number;
  image: string; // base64 payload, parsed lazily by the renderer
}

export type SyncAction =
  | { kind: "none" }
  | { kind: "refetch-decode"; set: string }
  | { kind: "deselect" };

export class EditorStore {
  sets: Map<string, SetInfo> = new Map();
  activeSet: string | null = null;
  frame: Frame | null = null;
  resolution = 64;
  pendingEdits = 0;
  readOnly = false;

  applySets(sets: SetInfo[]): SyncAction {
    const fresh = new Map(sets.map((s) => [s.name, s]));
    this.sets = fresh;
    if (this.activeSet === null) {
      return { kind: "none" };
    }
    const active = fresh.get(this.activeSet);
    if (active === undefined) {
      this.activeSet = null;
      this.frame = null;
      return { kind: "deselect" };
    }
    if (this.frame === null || this.frame.version !== active.version) {
      return { kind: "refetch-decode", set: this.activeSet };
    }
    return { kind: "none" };
  }

  selectSet(name: string | null): SyncAction {
    this.activeSet = name;
    this.frame = null;
    return name === null ? { kind: "none" } : { kind: "refetch-decode", set: name };
  }

  /** Record a mutation acknowledged by the server, advancing the version. */
  applyMutation(name: string, version: number): SyncAction {
    const info = this.sets.get(name);
    if (info) info.version = version;
    if (name === this.activeSet) {
      return { kind: "refetch-decode", set: name };
    }
    return { kind: "none" };
  }

  /**
   * Accept a decode only if it proves current: the set is still active and
   * its version matches what the overlay will draw.  Returns whether the
   * frame may be rendered.
   */
  acceptFrame(name: string, decode: DecodeResponse): boolean {
    if (name !== this.activeSet) return false;
    const info = this.sets.get(name);
    if (info === undefined || decode.version !== info.version) return false;
    this.frame = {
      version: decode.version,
      width: decode.width,
      height: decode.height,
      image: decode.image,
    };
    return true;
  }

  activeInfo(): SetInfo | null {
    return this.activeSet === null ? null : this.sets.get(this.activeSet) ?? null;
  }
}

/** Rate limiter for drag previews: at most one call per interval. */
export function makePreviewGate(intervalMs: number, now: () => number = Date.now) {
  let last = -Infinity;
  return () => {
    const t = now();
    if (t - last >= intervalMs) {
      last = t;
      return true;
    }
    return false;
  };
}
