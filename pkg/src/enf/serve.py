"""JSON-over-HTTP API for interactive latent editing.

The server loads one read-only checkpoint and any number of named latent
sets.  Reads hit an immutable snapshot; every mutation (global transform,
move/retype a single latent, stitch) replaces the set and bumps its
version counter, so clients can detect stale frames.  Decoded images ship
as base64 P6 PPM bytes: bit-exact and trivial to parse client-side.
"""

from __future__ import annotations

import base64
import os
import threading
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from fastapi import FastAPI, Query, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .data import ImageField, encode_ppm_bytes, make_grid
from .field import EnfConfig, EnfParams, attention_weights, field_forward, load_checkpoint
from .geometry import BiInvariantKind, GroupElement, GroupKind
from .latents import LatentError, LatentPoint, LatentSet, act_on_latent_set, half_plane, load_latents, stitch

__all__ = ["create_app", "SessionState", "stitch_region_dominance"]


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass
class _SetEntry:
    latent: LatentSet
    version: int
    lock: threading.Lock


class SessionState:
    """One loaded checkpoint plus named, versioned latent sets."""

    def __init__(
        self,
        params: EnfParams,
        config: EnfConfig,
        max_resolution: int = 256,
        default_resolution: int = 64,
    ):
        self.params = params
        self.config = config
        self.max_resolution = max_resolution
        self.default_resolution = default_resolution
        self._sets: Dict[str, _SetEntry] = {}

    def add_set(self, name: str, latent: LatentSet) -> str:
        base, suffix = name, 0
        while name in self._sets:
            suffix += 1
            name = f"{base}.{suffix}"
        self._sets[name] = _SetEntry(latent, version=1, lock=threading.Lock())
        return name

    def names(self) -> List[str]:
        return list(self._sets)

    def entry(self, name: str) -> _SetEntry:
        if name not in self._sets:
            raise ApiError(404, "unknown_set", f"no latent set named {name!r}")
        return self._sets[name]

    def mutate(self, name: str, fn) -> Tuple[int, Optional[str]]:
        entry = self.entry(name)
        with entry.lock:
            latent, warning = fn(entry.latent)
            entry.latent = latent
            entry.version += 1
            return entry.version, warning

    def decode(self, name: str, width: int, height: int) -> Tuple[bytes, int]:
        entry = self.entry(name)
        if not (1 <= width <= self.max_resolution and 1 <= height <= self.max_resolution):
            raise ApiError(
                422,
                "oversize",
                f"resolution {width}x{height} outside 1..{self.max_resolution}",
            )
        values = field_forward(make_grid(height, width), entry.latent, self.params, self.config).data
        image = ImageField(np.clip(values, 0.0, 1.0).reshape(height, width, -1))
        return encode_ppm_bytes(image), entry.version


def _pose_dict(point: LatentPoint) -> dict:
    return {
        "tx": point.pose.t[0],
        "ty": point.pose.t[1],
        "theta": point.pose.theta,
    }


def _group_element(kind: BiInvariantKind, tx: float, ty: float, theta: float):
    if kind is BiInvariantKind.ROTO_TRANSLATION:
        return GroupElement(GroupKind.ROTO_TRANSLATION_2D, (tx, ty), theta), None
    warning = None
    if theta:
        warning = f"kind {kind.value} has no rotations; theta ignored"
    if kind is BiInvariantKind.TRANSLATION:
        return GroupElement(GroupKind.TRANSLATION_2D, (tx, ty)), warning
    # Trivial poses still carry positions; translate them.
    return GroupElement(GroupKind.TRANSLATION_2D, (tx, ty)), warning


def _replace_point(latent: LatentSet, index: int, point: LatentPoint) -> LatentSet:
    points = list(latent.points)
    points[index] = point
    return LatentSet(tuple(points), latent.d_latent, latent.kind, latent.sample_id)


def create_app(
    checkpoint_path,
    latent_paths,
    max_resolution: int = 256,
    default_resolution: int = 64,
    ui_dir: Optional[str] = None,
) -> FastAPI:
    """Build the editor app for one checkpoint and initial latent files."""
    params, config = load_checkpoint(checkpoint_path)
    state = SessionState(params, config, max_resolution, default_resolution)
    for path in latent_paths:
        stem = os.path.splitext(os.path.basename(path))[0]
        sets = load_latents(path)
        for i, latent in enumerate(sets):
            name = latent.sample_id or (stem if len(sets) == 1 else f"{stem}.{i}")
            state.add_set(name, latent)

    app = FastAPI(title="enf latent editor")
    app.state.session = state
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(ApiError)
    async def handle_api_error(request: Request, err: ApiError):
        return JSONResponse(status_code=err.status, content={"code": err.code, "message": err.message})

    @app.get("/api/health")
    def health():
        return {"status": "ok", "sets": len(state.names())}

    @app.get("/api/sets")
    def list_sets():
        out = []
        for name in state.names():
            entry = state.entry(name)
            out.append(
                {
                    "name": name,
                    "N": entry.latent.n,
                    "d_latent": entry.latent.d_latent,
                    "kind": entry.latent.kind.value,
                    "version": entry.version,
                    "poses": [_pose_dict(pt) for pt in entry.latent.points],
                }
            )
        return {"sets": out}

    @app.get("/api/decode")
    def decode(
        set_name: str = Query(alias="set"),
        width: Optional[int] = None,
        height: Optional[int] = None,
    ):
        width = width or state.default_resolution
        height = height or state.default_resolution
        ppm, version = state.decode(set_name, width, height)
        return {
            "width": width,
            "height": height,
            "channels": state.config.out_channels,
            "version": version,
            "image": base64.b64encode(ppm).decode("ascii"),
        }

    async def _json_body(request: Request) -> dict:
        try:
            body = await request.json()
        except Exception:
            raise ApiError(422, "bad_json", "request body is not valid JSON")
        if not isinstance(body, dict):
            raise ApiError(422, "bad_json", "request body must be a JSON object")
        return body

    def _require(body: dict, key: str):
        if key not in body:
            raise ApiError(422, "missing_field", f"request body needs {key!r}")
        return body[key]

    @app.post("/api/transform")
    async def transform(request: Request):
        body = await _json_body(request)
        name = _require(body, "set")
        g_spec = _require(body, "g")
        entry = state.entry(name)
        g, warning = _group_element(
            entry.latent.kind,
            float(g_spec.get("tx", 0.0)),
            float(g_spec.get("ty", 0.0)),
            float(g_spec.get("theta", 0.0)),
        )
        version, _ = state.mutate(name, lambda latent: (act_on_latent_set(g, latent), None))
        out = {"name": name, "version": version}
        if warning:
            out["warning"] = warning
        return out

    @app.post("/api/edit")
    async def edit(request: Request):
        body = await _json_body(request)
        name = _require(body, "set")
        op = _require(body, "op")
        entry = state.entry(name)
        latent = entry.latent

        if op == "move_latent":
            index = int(_require(body, "index"))
            if not 0 <= index < latent.n:
                raise ApiError(422, "bad_index", f"index {index} out of range for N={latent.n}")
            pose_spec = _require(body, "pose")
            old = latent.points[index]
            theta = float(pose_spec.get("theta", old.pose.theta))
            kind = latent.kind
            if kind is BiInvariantKind.ROTO_TRANSLATION:
                new_pose = GroupElement(GroupKind.ROTO_TRANSLATION_2D,
                                        (float(pose_spec.get("tx", old.pose.t[0])),
                                         float(pose_spec.get("ty", old.pose.t[1]))), theta)
            else:
                pose_kind = kind.pose_kind
                new_pose = GroupElement(pose_kind,
                                        (float(pose_spec.get("tx", old.pose.t[0])),
                                         float(pose_spec.get("ty", old.pose.t[1]))))
            point = LatentPoint(new_pose, old.context, old.window_scale)
            version, _ = state.mutate(name, lambda l: (_replace_point(l, index, point), None))
            return {"name": name, "version": version}

        if op == "set_context":
            index = int(_require(body, "index"))
            if not 0 <= index < latent.n:
                raise ApiError(422, "bad_index", f"index {index} out of range for N={latent.n}")
            vector = np.asarray(_require(body, "context"), dtype=np.float64)
            if vector.shape != (latent.d_latent,):
                raise ApiError(
                    422, "bad_context", f"context must have length {latent.d_latent}"
                )
            old = latent.points[index]
            point = LatentPoint(old.pose, vector, old.window_scale)
            version, _ = state.mutate(name, lambda l: (_replace_point(l, index, point), None))
            return {"name": name, "version": version}

        if op == "stitch":
            other_name = _require(body, "other")
            region_spec = _require(body, "region")
            other = state.entry(other_name).latent
            normal = region_spec.get("normal", [1.0, 0.0])
            offset = float(region_spec.get("offset", 0.0))
            region = half_plane(tuple(float(v) for v in normal), offset)

            def apply(l: LatentSet):
                try:
                    return stitch(l, other, region), None
                except LatentError as err:
                    raise ApiError(409, "incompatible_stitch", str(err))

            version, _ = state.mutate(name, apply)
            return {"name": name, "version": version}

        raise ApiError(422, "unknown_op", f"unknown edit op {op!r}")

    if ui_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app


def stitch_region_dominance(
    za: LatentSet,
    zb: LatentSet,
    normal,
    offset: float,
    params: EnfParams,
    config: EnfConfig,
    resolution: int = 16,
    attention_threshold: float = 0.9,
) -> float:
    """Fraction of strongly-attended region pixels whose stitched decode
    is closer to decode(za) than to decode(zb).

    A pixel counts as strongly attended when the head-averaged attention
    mass it puts on latents inherited from ``za`` exceeds the threshold;
    only pixels inside the region (dot(normal, x) >= offset) are scored.
    """
    region = half_plane(normal, offset)
    merged = stitch(za, zb, region)
    grid = make_grid(resolution, resolution)
    img_a = field_forward(grid, za, params, config).data
    img_b = field_forward(grid, zb, params, config).data
    img_m = field_forward(grid, merged, params, config).data

    from_a = np.array([region(pt.pose.position) for pt in merged.points])
    scored = 0
    dominant = 0
    for i, x in enumerate(grid):
        if not region(x):
            continue
        idx, weights = attention_weights(x, merged, params, config)
        mass_a = float(weights.mean(axis=0)[from_a[idx]].sum())
        if mass_a < attention_threshold:
            continue
        scored += 1
        da = np.abs(img_m[i] - img_a[i]).mean()
        db = np.abs(img_m[i] - img_b[i]).mean()
        if da < db:
            dominant += 1
    return dominant / scored if scored else 0.0
