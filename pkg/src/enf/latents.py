"""Latent point clouds: pose-context tuples with init, editing, persistence.

A latent set z = {(p_i, c_i)} conditions the field.  Sets are immutable;
editing operations (transform, stitch) return new sets, which keeps them
safe to share across threads and across the HTTP editor's versioning.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from .enft import FormatError, read_enft, write_enft
from .geometry import BiInvariantKind, GroupElement, Pose, act_on_pose

_KIND_BYTE = {
    BiInvariantKind.NONE: 0,
    BiInvariantKind.TRANSLATION: 1,
    BiInvariantKind.ROTO_TRANSLATION: 2,
}
_KIND_FROM_BYTE = {v: k for k, v in _KIND_BYTE.items()}


class LatentError(Exception):
    """Inconsistent latent-set construction or combination."""


@dataclass(frozen=True)
class LatentPoint:
    """One pose-context tuple.

    ``window_scale`` is carried through serialization for forward
    compatibility but the field ignores it (the attention window width
    is a shared hyperparameter, not per-latent).
    """

    pose: Pose
    context: np.ndarray
    window_scale: Optional[float] = None

    def __post_init__(self):
        ctx = np.asarray(self.context)
        if ctx.ndim != 1:
            raise LatentError(f"context must be 1-D, got shape {ctx.shape}")
        ctx = ctx.copy()
        ctx.flags.writeable = False
        object.__setattr__(self, "context", ctx)


@dataclass(frozen=True)
class LatentSet:
    """Ordered latent point cloud plus the attribute kind it was fit under."""

    points: tuple
    d_latent: int
    kind: BiInvariantKind
    sample_id: Optional[str] = None

    def __post_init__(self):
        points = tuple(self.points)
        if not points:
            raise LatentError("a latent set needs at least one point")
        for pt in points:
            if pt.context.shape != (self.d_latent,):
                raise LatentError(
                    f"context length {pt.context.shape[0]} != d_latent {self.d_latent}"
                )
            if pt.pose.kind is not self.kind.pose_kind:
                raise LatentError(
                    f"pose kind {pt.pose.kind.value} does not match "
                    f"attribute kind {self.kind.value}"
                )
        object.__setattr__(self, "points", points)

    @property
    def n(self) -> int:
        return len(self.points)

    def context_matrix(self) -> np.ndarray:
        return np.stack([pt.context for pt in self.points])

    def pose_matrix(self) -> np.ndarray:
        """Poses as rows (tx, ty[, theta]) per the serialized layout."""
        rows = []
        for pt in self.points:
            row = list(pt.pose.t)
            if self.kind is BiInvariantKind.ROTO_TRANSLATION:
                row.append(pt.pose.theta)
            rows.append(row)
        return np.array(rows, dtype=np.float64)

    def positions(self) -> np.ndarray:
        return np.stack([pt.pose.position for pt in self.points])

    @classmethod
    def from_arrays(
        cls,
        kind: BiInvariantKind,
        poses: np.ndarray,
        contexts: np.ndarray,
        sample_id: Optional[str] = None,
        window_scales: Optional[Sequence[Optional[float]]] = None,
    ) -> "LatentSet":
        poses = np.asarray(poses, dtype=np.float64)
        contexts = np.asarray(contexts)
        if poses.ndim != 2 or poses.shape[1] != kind.pose_dim:
            raise LatentError(f"pose matrix must be [N x {kind.pose_dim}], got {poses.shape}")
        if contexts.ndim != 2 or contexts.shape[0] != poses.shape[0]:
            raise LatentError(
                f"contexts {contexts.shape} do not pair with poses {poses.shape}"
            )
        points = []
        for i, row in enumerate(poses):
            theta = float(row[2]) if kind is BiInvariantKind.ROTO_TRANSLATION else 0.0
            pose = Pose(kind.pose_kind, (float(row[0]), float(row[1])), theta)
            ws = window_scales[i] if window_scales is not None else None
            points.append(LatentPoint(pose, contexts[i], ws))
        return cls(tuple(points), contexts.shape[1], kind, sample_id)


def act_on_latent_set(g: GroupElement, z: LatentSet) -> LatentSet:
    """g z = {(g p_i, c_i)}: poses move, contexts and metadata ride along."""
    points = tuple(replace(pt, pose=act_on_pose(g, pt.pose)) for pt in z.points)
    return replace(z, points=points)


def _grid_factors(n: int) -> tuple:
    """Factor n = rows x cols with the smallest |rows - cols|, rows <= cols."""
    best = (1, n)
    for a in range(1, int(math.isqrt(n)) + 1):
        if n % a == 0:
            best = (a, n // a)
    return best


def init_grid_poses(
    n: int,
    kind: BiInvariantKind,
    noise_std: float = 1e-3,
    rng: Optional[np.random.Generator] = None,
) -> List[Pose]:
    """Poses at jittered cell centers of a near-square grid over [-1, 1]^2.

    Positions get independent Gaussian noise of the given std per
    coordinate; orientations start canonical (all zero).
    """
    if n <= 0:
        raise LatentError(f"need a positive latent count, got {n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    rows, cols = _grid_factors(n)
    ys = -1.0 + (2.0 * np.arange(rows) + 1.0) / rows
    xs = -1.0 + (2.0 * np.arange(cols) + 1.0) / cols
    poses = []
    for r in range(rows):
        for c in range(cols):
            jitter = rng.normal(0.0, noise_std, size=2) if noise_std > 0 else np.zeros(2)
            pos = (float(xs[c] + jitter[0]), float(ys[r] + jitter[1]))
            poses.append(Pose(kind.pose_kind, pos, 0.0))
    return poses


def init_fps_poses(
    n: int,
    candidates: np.ndarray,
    kind: BiInvariantKind,
    rng: Optional[np.random.Generator] = None,
) -> List[Pose]:
    """Greedy farthest-point subset of the candidate positions.

    The first point is drawn by the generator; each following point
    maximizes its minimum distance to the points already chosen.
    """
    candidates = np.asarray(candidates, dtype=np.float64)
    if candidates.ndim != 2 or candidates.shape[0] == 0:
        raise LatentError("candidate set must be a non-empty [M x 2] array")
    if n > candidates.shape[0]:
        raise LatentError(f"cannot pick {n} poses from {candidates.shape[0]} candidates")
    rng = rng if rng is not None else np.random.default_rng(0)
    chosen = [int(rng.integers(candidates.shape[0]))]
    min_dist = np.linalg.norm(candidates - candidates[chosen[0]], axis=1)
    while len(chosen) < n:
        nxt = int(np.argmax(min_dist))
        chosen.append(nxt)
        min_dist = np.minimum(min_dist, np.linalg.norm(candidates - candidates[nxt], axis=1))
    return [Pose(kind.pose_kind, tuple(candidates[i]), 0.0) for i in chosen]


def stitch(
    za: LatentSet, zb: LatentSet, region: Callable[[np.ndarray], bool]
) -> LatentSet:
    """Points of ``za`` whose position satisfies ``region`` plus the rest of ``zb``."""
    if za.d_latent != zb.d_latent or za.kind is not zb.kind:
        raise LatentError(
            f"incompatible sets: d_latent {za.d_latent}/{zb.d_latent}, "
            f"kind {za.kind.value}/{zb.kind.value}"
        )
    kept = [pt for pt in za.points if region(pt.pose.position)]
    kept += [pt for pt in zb.points if not region(pt.pose.position)]
    if not kept:
        raise LatentError("stitch produced an empty set; region excludes every point")
    return LatentSet(tuple(kept), za.d_latent, za.kind, za.sample_id)


def half_plane(normal: Sequence[float], offset: float) -> Callable[[np.ndarray], bool]:
    """Region predicate: dot(normal, position) >= offset."""
    normal = np.asarray(normal, dtype=np.float64)

    def predicate(position: np.ndarray) -> bool:
        return float(np.dot(normal, position)) >= offset

    return predicate


# --------------------------------------------------------------------------
# Persistence (.enfl)


def save_latents(path, sets: Sequence[LatentSet]) -> None:
    """Write latent sets to an ENFT container; round-trip is bitwise exact."""
    entries: dict = {"count": np.array([float(len(sets))], dtype=np.float64)}
    for i, z in enumerate(sets):
        meta = {
            "kind": z.kind.value,
            "d_latent": z.d_latent,
            "sample_id": z.sample_id,
            "window_scales": [pt.window_scale for pt in z.points],
        }
        entries[f"{i}/kind"] = bytes([_KIND_BYTE[z.kind]])
        entries[f"{i}/pose"] = z.pose_matrix()
        entries[f"{i}/context"] = z.context_matrix()
        entries[f"{i}/meta"] = json.dumps(meta).encode("utf-8")
    write_enft(path, entries)


def load_latents(path) -> List[LatentSet]:
    """Read latent sets written by :func:`save_latents`."""
    entries = read_enft(path)
    if "count" not in entries:
        raise FormatError(f"{path}: missing latent-set count entry")
    count = int(entries["count"][0])
    sets = []
    for i in range(count):
        try:
            kind_byte = entries[f"{i}/kind"][0]
            poses = entries[f"{i}/pose"]
            contexts = entries[f"{i}/context"]
            meta = json.loads(entries[f"{i}/meta"].decode("utf-8"))
        except KeyError as missing:
            raise FormatError(f"{path}: latent set {i} is missing entry {missing}") from None
        if kind_byte not in _KIND_FROM_BYTE:
            raise FormatError(f"{path}: unknown kind byte {kind_byte}")
        kind = _KIND_FROM_BYTE[kind_byte]
        if meta.get("kind") != kind.value:
            raise FormatError(
                f"{path}: kind byte {kind_byte} disagrees with metadata {meta.get('kind')!r}"
            )
        if int(meta["d_latent"]) != contexts.shape[1]:
            raise FormatError(
                f"{path}: d_latent {meta['d_latent']} disagrees with "
                f"context width {contexts.shape[1]}"
            )
        sets.append(
            LatentSet.from_arrays(
                kind,
                poses,
                contexts,
                sample_id=meta.get("sample_id"),
                window_scales=meta.get("window_scales"),
            )
        )
    return sets
