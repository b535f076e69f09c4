"""Discretized fields: PPM/PGM ingestion, coordinate grids, synthetic shapes.

Pixel centers map affinely onto [-1, 1]^2: pixel (row, col) sits at
(-1 + (2 col + 1) / W, -1 + (2 row + 1) / H).  The synthetic corpus
rasterizes posed disks, squares and crosses with 4x supersampling so
sub-pixel pose variation is learnable and ground-truth poses are known.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .geometry import GroupElement, GroupKind

SHAPE_CLASSES = ("disk", "square", "cross")


class ImageFormatError(Exception):
    """Malformed PPM/PGM input."""


@dataclass
class ImageField:
    """A sampled field on the pixel grid, values in [0, 1]."""

    values: np.ndarray  # [H, W, C] float64

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] not in (1, 3):
            raise ImageFormatError(f"expected [H, W, C] with C in {{1, 3}}, got {v.shape}")
        self.values = np.clip(v, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def flat_values(self) -> np.ndarray:
        """Row-major [H*W, C], matching :func:`make_grid` ordering."""
        return self.values.reshape(-1, self.channels)


def make_grid(height: int, width: int) -> np.ndarray:
    """Row-major pixel-center coordinates, shape [H*W, 2] as (x, y)."""
    if height < 1 or width < 1:
        raise ValueError(f"grid needs positive dimensions, got {height}x{width}")
    xs = -1.0 + (2.0 * np.arange(width) + 1.0) / width
    ys = -1.0 + (2.0 * np.arange(height) + 1.0) / height
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


def nearest_pixel(coord: Sequence[float], height: int, width: int) -> Tuple[int, int]:
    """Invert the coordinate convention: nearest (row, col) of a coordinate."""
    x, y = float(coord[0]), float(coord[1])
    col = int(np.clip(round((x + 1.0) * width / 2.0 - 0.5), 0, width - 1))
    row = int(np.clip(round((y + 1.0) * height / 2.0 - 0.5), 0, height - 1))
    return row, col


def sample_coords(
    coords: np.ndarray,
    values: np.ndarray,
    m: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """Uniform subsample of m coordinate/value pairs without replacement."""
    n = coords.shape[0]
    if m > n:
        raise ValueError(f"cannot sample {m} of {n} coordinates")
    idx = rng.choice(n, size=m, replace=False)
    return coords[idx], values[idx]


# --------------------------------------------------------------------------
# PPM / PGM


def _read_header_tokens(blob: bytes, count: int) -> Tuple[List[bytes], int]:
    """First ``count`` whitespace-separated tokens, skipping # comments."""
    tokens: List[bytes] = []
    i = 0
    while len(tokens) < count:
        if i >= len(blob):
            raise ImageFormatError("malformed header: file ended inside header")
        ch = blob[i : i + 1]
        if ch == b"#":
            while i < len(blob) and blob[i : i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            start = i
            while i < len(blob) and not blob[i : i + 1].isspace() and blob[i : i + 1] != b"#":
                i += 1
            tokens.append(blob[start:i])
    if i >= len(blob) or not blob[i : i + 1].isspace():
        raise ImageFormatError("malformed header: missing whitespace before payload")
    return tokens, i + 1


def load_ppm(path) -> ImageField:
    """Read a binary P6 (RGB) or P5 (gray) file with maxval 255."""
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, offset = _read_header_tokens(blob, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported magic {magic!r}, need P5 or P6")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise ImageFormatError(f"{path}: malformed header fields {tokens[1:4]}") from None
    if maxval != 255:
        raise ImageFormatError(f"{path}: maxval must be 255, got {maxval}")
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: bad dimensions {width}x{height}")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = blob[offset : offset + need]
    if len(payload) != need:
        raise ImageFormatError(
            f"{path}: truncated payload, expected {need} bytes, got {len(payload)}"
        )
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return ImageField(raw.astype(np.float64) / 255.0)


def save_ppm(image: ImageField, path) -> None:
    """Write P6 for RGB, P5 for gray; values rounded onto the 1/255 lattice."""
    magic = b"P6" if image.channels == 3 else b"P5"
    raw = np.rint(image.values * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (image.width, image.height))
        fh.write(raw.tobytes())


def encode_ppm_bytes(image: ImageField) -> bytes:
    """P6 bytes of an RGB field (singles are expanded to three channels)."""
    values = image.values
    if image.channels == 1:
        values = np.repeat(values, 3, axis=2)
    raw = np.rint(values * 255.0).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (image.width, image.height) + raw.tobytes()


# --------------------------------------------------------------------------
# Synthetic shape corpus


@dataclass
class SyntheticShapeSpec:
    """A posed, scaled, colored shape to rasterize."""

    shape_class: str
    pose: GroupElement
    scale: float
    fg: np.ndarray
    bg: np.ndarray
    resolution: int

    def __post_init__(self):
        if self.shape_class not in SHAPE_CLASSES:
            raise ValueError(f"unknown shape class {self.shape_class!r}")


def _inside_canonical(shape_class: str, pts: np.ndarray, scale: float) -> np.ndarray:
    x, y = pts[..., 0], pts[..., 1]
    if shape_class == "disk":
        return x * x + y * y <= scale * scale
    if shape_class == "square":
        half = 0.8 * scale
        return (np.abs(x) <= half) & (np.abs(y) <= half)
    arm, thick = scale, scale / 3.0
    return ((np.abs(x) <= thick) & (np.abs(y) <= arm)) | (
        (np.abs(y) <= thick) & (np.abs(x) <= arm)
    )


def _circumradius(shape_class: str, scale: float) -> float:
    if shape_class == "disk":
        return scale
    if shape_class == "square":
        return 0.8 * scale * math.sqrt(2.0)
    return math.hypot(scale, scale / 3.0)


SUPERSAMPLE = 4


def rasterize_shape(spec: SyntheticShapeSpec) -> ImageField:
    """Anti-aliased rasterization by 4x4 supersampling per pixel.

    Subsample offsets are fixed fractions of the pixel pitch, so a
    translation by exactly one pitch shifts the image by exactly one
    pixel.
    """
    res = spec.resolution
    pitch = 2.0 / res
    centers = make_grid(res, res)  # [res*res, 2]
    offsets = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE - 0.5
    ox, oy = np.meshgrid(offsets * pitch, offsets * pitch)
    sub = np.stack([ox.reshape(-1), oy.reshape(-1)], axis=1)  # [16, 2]
    pts = centers[:, None, :] + sub[None, :, :]  # [res*res, 16, 2]

    # Pull sample points back through the pose: inside iff g^-1 x in shape.
    from .geometry import act_on_point, group_inverse

    flat = pts.reshape(-1, 2)
    canonical = act_on_point(group_inverse(spec.pose), flat).reshape(res * res, -1, 2)
    coverage = _inside_canonical(spec.shape_class, canonical, spec.scale).mean(axis=1)
    values = spec.bg[None, :] + coverage[:, None] * (spec.fg - spec.bg)[None, :]
    return ImageField(values.reshape(res, res, 3))


def _sample_colors(rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    # Random gray levels: appearance varies per sample but stays cheap to
    # encode, so the latent budget goes to geometry rather than chroma.
    while True:
        fg = np.full(3, rng.uniform(0.0, 1.0))
        bg = np.full(3, rng.uniform(0.0, 1.0))
        if abs(fg[0] - bg[0]) >= 0.3:
            return fg, bg


def _sample_pose(rng: np.random.Generator, shape_class: str, scale: float) -> GroupElement:
    while True:
        t = rng.uniform(-0.4, 0.4, size=2)
        theta = rng.uniform(0.0, 2.0 * math.pi)
        if np.abs(t).max() + _circumradius(shape_class, scale) <= 1.0:
            return GroupElement(GroupKind.ROTO_TRANSLATION_2D, tuple(t), theta)


def synth_shape_specs(
    n_samples: int,
    resolution: int,
    rng: np.random.Generator,
) -> List[SyntheticShapeSpec]:
    """Balanced random shape specs with rejection-sampled poses.

    Poses are uniform over translations in [-0.4, 0.4]^2 and rotations in
    [0, 2pi), re-drawn until the posed shape fits inside [-1, 1]^2;
    colors are class-independent, so appearance statistics carry little
    label signal and geometry has to do the work downstream.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    specs = []
    for i in range(n_samples):
        shape_class = SHAPE_CLASSES[i % len(SHAPE_CLASSES)]
        scale = rng.uniform(0.35, 0.55)
        fg, bg = _sample_colors(rng)
        pose = _sample_pose(rng, shape_class, scale)
        specs.append(SyntheticShapeSpec(shape_class, pose, scale, fg, bg, resolution))
    return specs


def synth_shapes(
    n_samples: int,
    resolution: int,
    rng: np.random.Generator,
) -> List[Tuple[ImageField, int, GroupElement]]:
    """Balanced dataset of (image, class label, true pose) triples."""
    return [
        (rasterize_shape(spec), SHAPE_CLASSES.index(spec.shape_class), spec.pose)
        for spec in synth_shape_specs(n_samples, resolution, rng)
    ]


# --------------------------------------------------------------------------
# Corpus on disk


def _worker_count() -> int:
    raw = os.environ.get("ENF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def write_corpus(
    directory,
    samples: Sequence[Tuple[ImageField, int, GroupElement]],
    prefix: str = "sample",
) -> str:
    """Write PPMs plus a manifest.json; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    resolution = None
    for i, (image, label, pose) in enumerate(samples):
        name = f"{prefix}_{i:04d}.ppm"
        save_ppm(image, os.path.join(directory, name))
        entries.append(
            {
                "path": name,
                "label": int(label),
                "pose": {"tx": pose.t[0], "ty": pose.t[1], "theta": pose.theta},
            }
        )
        resolution = [image.height, image.width]
    manifest = {
        "samples": entries,
        "resolution": resolution,
        "classes": list(SHAPE_CLASSES),
    }
    manifest_path = os.path.join(directory, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest_path


@dataclass
class Corpus:
    """Loaded dataset: images with labels, poses, and the shared grid."""

    images: List[ImageField]
    labels: List[int]
    poses: List[GroupElement]
    classes: List[str]
    resolution: Tuple[int, int]

    def __len__(self) -> int:
        return len(self.images)

    @property
    def grid(self) -> np.ndarray:
        return make_grid(*self.resolution)


def load_corpus(manifest_path) -> Corpus:
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    entries = manifest["samples"]

    def load_one(entry):
        return load_ppm(os.path.join(base, entry["path"]))

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            images = list(pool.map(load_one, entries))
    else:
        images = [load_one(e) for e in entries]
    labels = [int(e["label"]) for e in entries]
    poses = [
        GroupElement(
            GroupKind.ROTO_TRANSLATION_2D,
            (e["pose"]["tx"], e["pose"]["ty"]),
            e["pose"]["theta"],
        )
        for e in entries
    ]
    return Corpus(
        images=images,
        labels=labels,
        poses=poses,
        classes=list(manifest["classes"]),
        resolution=tuple(manifest["resolution"]),
    )
