"""The equivariant field: windowed kNN cross-attention from latents to signal.

A coordinate x attends over the latent set through attributes a(x, p_i)
that are invariant under joint transformation of coordinate and pose, so
the decoded field inherits steerability: f(g^-1 x; z) = f(x; g z).
Queries embed the attribute with frozen Gaussian random Fourier features,
keys/values come from the contexts, and the value transform is
FiLM-modulated by a second attribute embedding.  A Gaussian window
-sigma_att * ||p_i - x||^2 added to the attention logits localizes each
latent; truncating attention to the k nearest latents keeps cost linear
without changing results materially.

Two deliberately separate attention routes exist: a broadcast route over
all latents ("all") and a gather route over the k nearest.  With k = N
they must agree, which the test suite uses as a cross-check.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Tuple, Union

import numpy as np

from . import numerics as nm
from .enft import FormatError, read_enft, write_enft
from .geometry import BiInvariantKind
from .latents import LatentSet
from .numerics import Tensor

__all__ = [
    "EnfConfig",
    "EnfParams",
    "LatentTensors",
    "ConfigError",
    "default_sigma_att",
    "init_params",
    "rff_embed",
    "value_transform",
    "attention_weights",
    "field_forward",
    "latent_tensors",
    "tensors_to_latent_set",
    "save_checkpoint",
    "load_checkpoint",
]


class ConfigError(Exception):
    """Invalid field configuration or configuration/data mismatch."""


def default_sigma_att(n_latents: int) -> float:
    """Window strength scaled to the latent grid density."""
    return 2.0 * n_latents


@dataclass
class EnfConfig:
    """Hyperparameters of the field architecture."""

    kind: BiInvariantKind
    d_latent: int
    d_hidden: int
    num_heads: int
    rff_dim: int
    sigma_q: float = 1.0
    sigma_v: float = 3.0
    sigma_att: float = 0.0
    k_nearest: Union[int, str] = "all"
    out_channels: int = 3
    dtype: str = "f32"

    def __post_init__(self):
        if isinstance(self.kind, str):
            self.kind = BiInvariantKind(self.kind)
        self.validate()

    def validate(self) -> None:
        if self.d_hidden % self.num_heads != 0:
            raise ConfigError(
                f"d_hidden {self.d_hidden} not divisible by num_heads {self.num_heads}"
            )
        if self.rff_dim % 2 != 0:
            raise ConfigError(f"rff_dim must be even, got {self.rff_dim}")
        if self.k_nearest != "all" and (not isinstance(self.k_nearest, int) or self.k_nearest < 1):
            raise ConfigError(f"k_nearest must be a positive integer or 'all', got {self.k_nearest!r}")
        if self.sigma_att < 0:
            raise ConfigError(f"sigma_att must be >= 0, got {self.sigma_att}")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be 'f32' or 'f64', got {self.dtype!r}")

    @property
    def a_dim(self) -> int:
        return self.kind.a_dim

    @property
    def d_head(self) -> int:
        return self.d_hidden // self.num_heads

    def to_json(self) -> str:
        data = asdict(self)
        data["kind"] = self.kind.value
        return json.dumps(data)

    @classmethod
    def from_json(cls, payload: str) -> "EnfConfig":
        data = json.loads(payload)
        return cls(**data)


@dataclass
class EnfParams:
    """All field weights; the frequency matrices are frozen, the rest train."""

    b_q: Tensor
    b_v: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_gamma: Tensor
    w_beta: Tensor
    w_o: Tensor

    def trainable(self) -> dict:
        return {
            "w_q": self.w_q,
            "w_k": self.w_k,
            "w_v": self.w_v,
            "w_gamma": self.w_gamma,
            "w_beta": self.w_beta,
            "w_o": self.w_o,
        }

    def frozen(self) -> dict:
        return {"b_q": self.b_q, "b_v": self.b_v}

    def all_tensors(self) -> dict:
        return {**self.frozen(), **self.trainable()}

    def replace_trainable(self, updated: dict) -> "EnfParams":
        return EnfParams(b_q=self.b_q, b_v=self.b_v, **updated)


def expected_shapes(config: EnfConfig) -> dict:
    half = config.rff_dim // 2
    return {
        "b_q": (half, config.a_dim),
        "b_v": (half, config.a_dim),
        "w_q": (config.d_hidden, config.rff_dim),
        "w_k": (config.d_hidden, config.d_latent),
        "w_v": (config.d_hidden, config.d_latent),
        "w_gamma": (config.d_hidden, config.rff_dim),
        "w_beta": (config.d_hidden, config.rff_dim),
        "w_o": (config.out_channels, config.d_hidden),
    }


def init_params(config: EnfConfig, rng: np.random.Generator) -> EnfParams:
    """Fan-in uniform weights; frozen N(0, sigma^2) frequency matrices."""
    shapes = expected_shapes(config)

    def uniform(shape):
        lim = math.sqrt(1.0 / shape[1])
        return nm.tensor(rng.uniform(-lim, lim, size=shape), config.dtype, requires_grad=True)

    b_q = nm.tensor(rng.normal(0.0, config.sigma_q, size=shapes["b_q"]), config.dtype)
    b_v = nm.tensor(rng.normal(0.0, config.sigma_v, size=shapes["b_v"]), config.dtype)
    return EnfParams(
        b_q=b_q,
        b_v=b_v,
        w_q=uniform(shapes["w_q"]),
        w_k=uniform(shapes["w_k"]),
        w_v=uniform(shapes["w_v"]),
        w_gamma=uniform(shapes["w_gamma"]),
        w_beta=uniform(shapes["w_beta"]),
        w_o=uniform(shapes["w_o"]),
    )


# --------------------------------------------------------------------------
# Latent tensors


@dataclass
class LatentTensors:
    """A latent set lowered to tensors so fitting can differentiate it."""

    kind: BiInvariantKind
    pose: Tensor
    context: Tensor

    @property
    def n(self) -> int:
        return self.pose.shape[0]

    @property
    def d_latent(self) -> int:
        return self.context.shape[1]


def latent_tensors(z: LatentSet, dtype: str = "f32", requires_grad: bool = False) -> LatentTensors:
    pose = nm.tensor(z.pose_matrix(), dtype, requires_grad=requires_grad)
    context = nm.tensor(z.context_matrix(), dtype, requires_grad=requires_grad)
    return LatentTensors(z.kind, pose, context)


def tensors_to_latent_set(lt: LatentTensors, sample_id: Optional[str] = None) -> LatentSet:
    return LatentSet.from_arrays(
        lt.kind, lt.pose.data.astype(np.float64), lt.context.data, sample_id=sample_id
    )


# --------------------------------------------------------------------------
# Building blocks


def rff_embed(u: Tensor, b: Tensor) -> Tensor:
    """Gaussian random Fourier features concat(cos(2 pi B u), sin(2 pi B u))."""
    if u.ndim != 2 or b.ndim != 2 or u.shape[1] != b.shape[1]:
        raise nm.DimensionError(
            f"rff_embed: inputs {u.shape} do not match frequency matrix {b.shape}"
        )
    proj = nm.mul(nm.matmul(u, nm.transpose(b)), 2.0 * math.pi)
    return nm.concat([nm.cos(proj), nm.sin(proj)], axis=1)


def value_transform(a_emb: Tensor, c: Tensor, params: EnfParams) -> Tensor:
    """FiLM value: (W_v c) * (W_gamma a) + (W_beta a), rows paired."""
    single = a_emb.ndim == 1
    if single:
        a_emb = nm.reshape(a_emb, (1, a_emb.shape[0]))
        c = nm.reshape(c, (1, c.shape[0]))
    gamma = nm.matmul(a_emb, nm.transpose(params.w_gamma))
    beta = nm.matmul(a_emb, nm.transpose(params.w_beta))
    vc = nm.matmul(c, nm.transpose(params.w_v))
    out = nm.add(nm.mul(vc, gamma), beta)
    return nm.reshape(out, (out.shape[1],)) if single else out


def _rotate_into_pose(dx_x: Tensor, dx_y: Tensor, theta: Tensor) -> Tuple[Tensor, Tensor]:
    """Apply R(-theta) to the displacement components (shapes broadcast)."""
    c, s = nm.cos(theta), nm.sin(theta)
    ax = nm.add(nm.mul(c, dx_x), nm.mul(s, dx_y))
    ay = nm.sub(nm.mul(c, dx_y), nm.mul(s, dx_x))
    return ax, ay


def _paired_attributes(
    kind: BiInvariantKind, coords: Tensor, pose: Tensor
) -> Tuple[Tensor, Tensor]:
    """Attributes and squared distances for row-paired coords/poses [R x *]."""
    pos = nm.narrow(pose, 1, 0, 2)
    dx = nm.sub(coords, pos)
    sqdist = nm.reduce_sum(nm.mul(dx, dx), axis=1, keepdims=True)
    if kind is BiInvariantKind.TRANSLATION:
        return dx, sqdist
    if kind is BiInvariantKind.ROTO_TRANSLATION:
        theta = nm.narrow(pose, 1, 2, 1)
        ax, ay = _rotate_into_pose(nm.narrow(dx, 1, 0, 1), nm.narrow(dx, 1, 1, 1), theta)
        return nm.concat([ax, ay], axis=1), sqdist
    return nm.concat([pos, coords], axis=1), sqdist


def _check_compat(z: LatentTensors, config: EnfConfig) -> None:
    if z.kind is not config.kind:
        raise ConfigError(f"latent kind {z.kind.value} != config kind {config.kind.value}")
    if z.d_latent != config.d_latent:
        raise ConfigError(f"latent width {z.d_latent} != config d_latent {config.d_latent}")
    if config.k_nearest != "all" and config.k_nearest > z.n:
        raise ConfigError(f"k_nearest {config.k_nearest} exceeds latent count {z.n}")


def _as_latent_tensors(z, config: EnfConfig) -> LatentTensors:
    if isinstance(z, LatentSet):
        return latent_tensors(z, config.dtype)
    return z


def _as_coord_tensor(coords, config: EnfConfig) -> Tensor:
    if isinstance(coords, Tensor):
        return coords
    return nm.tensor(np.asarray(coords, dtype=np.float64), config.dtype)


def _head_mix(att: Tensor, v: Tensor, m: int, n: int, config: EnfConfig) -> Tensor:
    """Attention-weighted per-head sums, heads re-concatenated: [M x d_hidden]."""
    h, dk = config.num_heads, config.d_head
    v4 = nm.reshape(v, (m, n, h, dk))
    att4 = nm.reshape(nm.transpose(nm.reshape(att, (m, h, n)), (0, 2, 1)), (m, n, h, 1))
    return nm.reshape(nm.reduce_sum(nm.mul(v4, att4), axis=1), (m, h * dk))


def _attention_full(
    coords: Tensor, z: LatentTensors, params: EnfParams, config: EnfConfig
) -> Tuple[Tensor, Tensor, int, int]:
    """Broadcast attention over every latent; returns (att [M*H x N], a [M*N x a_dim])."""
    m, n = coords.shape[0], z.n
    h = config.num_heads
    x3 = nm.reshape(coords, (m, 1, 2))
    pos3 = nm.reshape(nm.narrow(z.pose, 1, 0, 2), (1, n, 2))
    dx = nm.sub(x3, pos3)
    sqdist = nm.reduce_sum(nm.mul(dx, dx), axis=2, keepdims=True)
    if config.kind is BiInvariantKind.TRANSLATION:
        a3 = dx
    elif config.kind is BiInvariantKind.ROTO_TRANSLATION:
        theta = nm.reshape(nm.narrow(z.pose, 1, 2, 1), (1, n, 1))
        ax, ay = _rotate_into_pose(
            nm.narrow(dx, 2, 0, 1), nm.narrow(dx, 2, 1, 1), theta
        )
        a3 = nm.concat([ax, ay], axis=2)
    else:
        a3 = nm.concat(
            [nm.broadcast_to(pos3, (m, n, 2)), nm.broadcast_to(x3, (m, n, 2))], axis=2
        )
    a = nm.reshape(a3, (m * n, config.a_dim))

    q = nm.matmul(rff_embed(a, params.b_q), nm.transpose(params.w_q))
    keys = nm.matmul(z.context, nm.transpose(params.w_k))
    q4 = nm.reshape(q, (m, n, h, config.d_head))
    k4 = nm.reshape(keys, (1, n, h, config.d_head))
    logits = nm.mul(nm.reduce_sum(nm.mul(q4, k4), axis=3), 1.0 / math.sqrt(config.d_head))
    logits2 = nm.reshape(nm.transpose(logits, (0, 2, 1)), (m * h, n))
    if config.sigma_att > 0:
        mu = nm.mul(sqdist, -config.sigma_att)
        bias = nm.reshape(nm.transpose(nm.broadcast_to(mu, (m, n, h)), (0, 2, 1)), (m * h, n))
    else:
        bias = nm.zeros_like(logits2)
    att = nm.softmax_with_bias(logits2, bias)
    return att, a, m, n


def _knn_indices(coords_np: np.ndarray, positions: np.ndarray, k: int) -> np.ndarray:
    """Row-sorted indices of the k nearest latents per coordinate.

    Ties break toward the lowest latent index (stable argsort); sorting
    the selected indices ascending fixes the softmax summation order so a
    k = N truncation reproduces full attention term for term.
    """
    d2 = ((coords_np[:, None, :] - positions[None, :, :]) ** 2).sum(axis=2)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return np.sort(order, axis=1)


def _attention_knn(
    coords: Tensor, z: LatentTensors, params: EnfParams, config: EnfConfig, k: int
) -> Tuple[Tensor, Tensor, Tensor, np.ndarray, int]:
    """Gather attention over the k nearest latents per coordinate."""
    m = coords.shape[0]
    h = config.num_heads
    idx = _knn_indices(coords.data, z.pose.data[:, :2], k)
    flat = idx.reshape(-1)
    pose_sel = nm.take(z.pose, flat)
    ctx_sel = nm.take(z.context, flat)
    coords_rep = nm.take(coords, np.repeat(np.arange(m, dtype=np.int64), k))
    a, sqdist = _paired_attributes(config.kind, coords_rep, pose_sel)

    q = nm.matmul(rff_embed(a, params.b_q), nm.transpose(params.w_q))
    keys = nm.matmul(ctx_sel, nm.transpose(params.w_k))
    q4 = nm.reshape(q, (m, k, h, config.d_head))
    k4 = nm.reshape(keys, (m, k, h, config.d_head))
    logits = nm.mul(nm.reduce_sum(nm.mul(q4, k4), axis=3), 1.0 / math.sqrt(config.d_head))
    logits2 = nm.reshape(nm.transpose(logits, (0, 2, 1)), (m * h, k))
    if config.sigma_att > 0:
        mu3 = nm.reshape(nm.mul(sqdist, -config.sigma_att), (m, k, 1))
        bias = nm.reshape(nm.transpose(nm.broadcast_to(mu3, (m, k, h)), (0, 2, 1)), (m * h, k))
    else:
        bias = nm.zeros_like(logits2)
    att = nm.softmax_with_bias(logits2, bias)
    return att, a, ctx_sel, idx, m


def field_forward(coords, z, params: EnfParams, config: EnfConfig) -> Tensor:
    """Decode the field at ``coords`` [M x 2], returning [M x out_channels].

    Differentiable with respect to the weights and, when ``z`` is given
    as :class:`LatentTensors` with gradient-enabled tensors, the latent
    contexts and pose coordinates.
    """
    zt = _as_latent_tensors(z, config)
    _check_compat(zt, config)
    coords_t = _as_coord_tensor(coords, config)
    if coords_t.ndim != 2 or coords_t.shape[1] != 2:
        raise ConfigError(f"coords must be [M x 2], got {coords_t.shape}")

    if config.k_nearest == "all":
        att, a, m, n = _attention_full(coords_t, zt, params, config)
        emb_v = rff_embed(a, params.b_v)
        gamma = nm.matmul(emb_v, nm.transpose(params.w_gamma))
        beta = nm.matmul(emb_v, nm.transpose(params.w_beta))
        vc = nm.reshape(nm.matmul(zt.context, nm.transpose(params.w_v)), (1, n, config.d_hidden))
        v3 = nm.add(
            nm.mul(nm.broadcast_to(vc, (m, n, config.d_hidden)), nm.reshape(gamma, (m, n, config.d_hidden))),
            nm.reshape(beta, (m, n, config.d_hidden)),
        )
        hidden = _head_mix(att, nm.reshape(v3, (m * n, config.d_hidden)), m, n, config)
    else:
        att, a, ctx_sel, _, m = _attention_knn(coords_t, zt, params, config, config.k_nearest)
        v = value_transform(rff_embed(a, params.b_v), ctx_sel, params)
        hidden = _head_mix(att, v, m, config.k_nearest, config)
    return nm.matmul(hidden, nm.transpose(params.w_o))


def attention_weights(
    x, z, params: EnfParams, config: EnfConfig
) -> Tuple[np.ndarray, np.ndarray]:
    """Selected latent indices and per-head attention simplex for one coordinate.

    Returns ``(indices [k], weights [num_heads x k])``; with
    ``k_nearest == "all"`` the indices are simply 0..N-1.
    """
    zt = _as_latent_tensors(z, config)
    _check_compat(zt, config)
    coords_t = _as_coord_tensor(np.asarray(x, dtype=np.float64).reshape(1, 2), config)
    if config.k_nearest == "all":
        att, _, _, n = _attention_full(coords_t, zt, params, config)
        return np.arange(n, dtype=np.int64), att.data.reshape(config.num_heads, n).copy()
    att, _, _, idx, _ = _attention_knn(coords_t, zt, params, config, config.k_nearest)
    return idx[0].copy(), att.data.reshape(config.num_heads, config.k_nearest).copy()


# --------------------------------------------------------------------------
# Checkpoints (.enfc)


def save_checkpoint(path, params: EnfParams, config: EnfConfig) -> None:
    entries: dict = {name: t.data for name, t in params.all_tensors().items()}
    entries["config"] = config.to_json().encode("utf-8")
    write_enft(path, entries)


def load_checkpoint(path) -> Tuple[EnfParams, EnfConfig]:
    """Load a checkpoint, validating tensor shapes against its config."""
    entries = read_enft(path)
    if "config" not in entries:
        raise FormatError(f"{path}: checkpoint has no config entry")
    config = EnfConfig.from_json(entries["config"].decode("utf-8"))
    shapes = expected_shapes(config)
    tensors = {}
    for name, shape in shapes.items():
        if name not in entries:
            raise FormatError(f"{path}: checkpoint is missing tensor {name!r}")
        arr = entries[name]
        if tuple(arr.shape) != shape:
            raise FormatError(
                f"{path}: tensor {name!r} has shape {tuple(arr.shape)}, config implies {shape}"
            )
        trainable = name not in ("b_q", "b_v")
        tensors[name] = nm.tensor(arr, config.dtype, requires_grad=trainable)
    return EnfParams(**tensors), config
