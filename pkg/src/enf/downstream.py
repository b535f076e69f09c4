"""Invariant message passing over latent point clouds, plus baselines.

The classifier sees a latent set as a fully connected graph (self-edges
included) whose edge features are relative-pose attributes of the same
family the field was fit under, so its logits are exactly invariant to
global group actions on the latent set.  A pose-blind baseline that pools
mean context only is included for the geometry-versus-appearance
comparison.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nm
from .enft import FormatError, read_enft, write_enft
from .field import rff_embed
from .fitting import adam_step
from .geometry import BiInvariantKind, KindMismatchError, Pose, rotation_matrix
from .latents import LatentSet
from .numerics import GradientTape, Tensor, backward

__all__ = [
    "MpnnConfig",
    "MpnnParams",
    "relative_pose_invariant",
    "mpnn_forward",
    "mpnn_logits",
    "train_classifier",
    "BaselineParams",
    "baseline_forward",
    "train_mean_context_baseline",
    "accuracy",
    "save_classifier",
    "load_classifier",
    "write_predictions_csv",
]


@dataclass
class MpnnConfig:
    """Architecture of the latent-cloud classifier."""

    d_latent: int
    n_classes: int
    kind: BiInvariantKind
    n_layers: int = 2
    d_node_hidden: int = 32
    edge_rff_dim: int = 16
    sigma_edge: float = 1.0
    dtype: str = "f64"

    def __post_init__(self):
        if isinstance(self.kind, str):
            self.kind = BiInvariantKind(self.kind)
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.edge_rff_dim % 2 != 0:
            raise ValueError(f"edge_rff_dim must be even, got {self.edge_rff_dim}")

    @property
    def rel_dim(self) -> int:
        return 2 if self.kind is BiInvariantKind.TRANSLATION else 4

    def to_json(self) -> str:
        data = dict(self.__dict__)
        data["kind"] = self.kind.value
        return json.dumps(data)

    @classmethod
    def from_json(cls, payload: str) -> "MpnnConfig":
        return cls(**json.loads(payload))


def relative_pose_invariant(p_i: Pose, p_j: Pose, kind: BiInvariantKind) -> np.ndarray:
    """Flattened relative pose p_j^-1 p_i, invariant under global motion.

    Translation: t_i - t_j.  Roto-translation: R(-theta_j)(t_i - t_j)
    with the relative angle as (cos, sin) to dodge the 2 pi seam.  The
    NONE family concatenates raw positions and is (deliberately) not
    invariant.
    """
    if p_i.kind is not p_j.kind:
        raise KindMismatchError(f"poses of kinds {p_i.kind.value} and {p_j.kind.value}")
    if kind is BiInvariantKind.NONE:
        return np.concatenate([p_i.position, p_j.position])
    if kind is BiInvariantKind.TRANSLATION:
        return p_i.position - p_j.position
    delta = rotation_matrix(-p_j.theta) @ (p_i.position - p_j.position)
    angle = p_i.theta - p_j.theta
    return np.concatenate([delta, [math.cos(angle), math.sin(angle)]])


def _edge_features(z: LatentSet, config: MpnnConfig) -> np.ndarray:
    n = z.n
    feats = np.zeros((n * n, config.rel_dim), dtype=np.float64)
    for i, pi in enumerate(z.points):
        for j, pj in enumerate(z.points):
            feats[i * n + j] = relative_pose_invariant(pi.pose, pj.pose, config.kind)
    return feats


def _mlp_params(rng, d_in: int, d_hidden: int, d_out: int, dtype: str, prefix: str) -> Dict[str, Tensor]:
    def linear(name, fan_in, fan_out):
        lim = math.sqrt(1.0 / fan_in)
        w = nm.tensor(rng.uniform(-lim, lim, size=(fan_out, fan_in)), dtype, requires_grad=True)
        b = nm.zeros((1, fan_out), dtype, requires_grad=True)
        return {f"{prefix}/{name}_w": w, f"{prefix}/{name}_b": b}

    params = linear("fc1", d_in, d_hidden)
    params.update(linear("fc2", d_hidden, d_out))
    return params


def _mlp_apply(params: Dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    h = nm.add(nm.matmul(x, nm.transpose(params[f"{prefix}/fc1_w"])), params[f"{prefix}/fc1_b"])
    h = nm.relu(h)
    return nm.add(nm.matmul(h, nm.transpose(params[f"{prefix}/fc2_w"])), params[f"{prefix}/fc2_b"])


@dataclass
class MpnnParams:
    """Flat name-to-tensor table; the edge frequency matrix is frozen."""

    table: Dict[str, Tensor]
    b_edge: Tensor

    def trainable(self) -> Dict[str, Tensor]:
        return dict(self.table)

    def all_tensors(self) -> Dict[str, Tensor]:
        return {**self.table, "b_edge": self.b_edge}


def init_mpnn(config: MpnnConfig, rng: np.random.Generator) -> MpnnParams:
    table: Dict[str, Tensor] = {}
    d_in = config.d_latent
    for layer in range(config.n_layers):
        msg_in = 2 * d_in + config.edge_rff_dim
        table.update(
            _mlp_params(rng, msg_in, config.d_node_hidden, config.d_node_hidden, config.dtype, f"l{layer}/msg")
        )
        upd_in = d_in + config.d_node_hidden
        table.update(
            _mlp_params(rng, upd_in, config.d_node_hidden, config.d_node_hidden, config.dtype, f"l{layer}/upd")
        )
        d_in = config.d_node_hidden
    lim = math.sqrt(1.0 / d_in)
    table["head_w"] = nm.tensor(
        rng.uniform(-lim, lim, size=(config.n_classes, d_in)), config.dtype, requires_grad=True
    )
    table["head_b"] = nm.zeros((1, config.n_classes), config.dtype, requires_grad=True)
    b_edge = nm.tensor(
        rng.normal(0.0, config.sigma_edge, size=(config.edge_rff_dim // 2, config.rel_dim)),
        config.dtype,
    )
    return MpnnParams(table, b_edge)


def mpnn_forward(z: LatentSet, params: MpnnParams, config: MpnnConfig) -> Tensor:
    """Class logits [1 x n_classes] for one latent set."""
    if z.kind is not config.kind:
        raise KindMismatchError(
            f"latent kind {z.kind.value} does not match classifier kind {config.kind.value}"
        )
    if z.d_latent != config.d_latent:
        raise ValueError(f"latent width {z.d_latent} != classifier d_latent {config.d_latent}")
    n = z.n
    edge_emb = rff_embed(
        nm.tensor(_edge_features(z, config), config.dtype), params.b_edge
    )  # [n*n, edge_rff_dim]
    h = nm.tensor(z.context_matrix(), config.dtype)
    send = np.repeat(np.arange(n, dtype=np.int64), n)  # receiver index i per edge row
    recv = np.tile(np.arange(n, dtype=np.int64), n)  # sender index j per edge row
    for layer in range(config.n_layers):
        h_i = nm.take(h, send)
        h_j = nm.take(h, recv)
        msg = _mlp_apply(params.table, f"l{layer}/msg", nm.concat([h_i, h_j, edge_emb], axis=1))
        agg = nm.mul(
            nm.reduce_sum(nm.reshape(msg, (n, n, config.d_node_hidden)), axis=1), 1.0 / n
        )
        h = _mlp_apply(params.table, f"l{layer}/upd", nm.concat([h, agg], axis=1))
    pooled = nm.mean(h, axis=0, keepdims=True)
    return nm.add(nm.matmul(pooled, nm.transpose(params.table["head_w"])), params.table["head_b"])


def mpnn_logits(z: LatentSet, params: MpnnParams, config: MpnnConfig) -> np.ndarray:
    return mpnn_forward(z, params, config).data.reshape(-1).copy()


# --------------------------------------------------------------------------
# Mean-context baseline (pose-blind)


@dataclass
class BaselineParams:
    table: Dict[str, Tensor]

    def trainable(self) -> Dict[str, Tensor]:
        return dict(self.table)


def init_baseline(config: MpnnConfig, rng: np.random.Generator) -> BaselineParams:
    table = _mlp_params(rng, config.d_latent, config.d_node_hidden, config.n_classes, config.dtype, "mlp")
    return BaselineParams(table)


def baseline_forward(z: LatentSet, params: BaselineParams, config: MpnnConfig) -> Tensor:
    """Logits from the mean context alone; poses never enter."""
    pooled = z.context_matrix().mean(axis=0, keepdims=True)
    return _mlp_apply(params.table, "mlp", nm.tensor(pooled, config.dtype))


# --------------------------------------------------------------------------
# Training


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Stable -log softmax(logits)[label] for a [1 x C] logits row."""
    shift = nm.sub(logits, float(np.max(logits.data)))
    lse = nm.log(nm.reduce_sum(nm.exp(shift), axis=1, keepdims=True))
    logp = nm.sub(shift, lse)
    return nm.neg(nm.narrow(nm.reshape(logp, (logits.shape[1], 1)), 0, int(label), 1))


def accuracy(forward_fn, sets: Sequence[LatentSet], labels: Sequence[int]) -> float:
    hits = 0
    for z, y in zip(sets, labels):
        pred = int(np.argmax(forward_fn(z).data))
        hits += int(pred == y)
    return hits / max(1, len(sets))


def _train_logit_model(
    forward_fn,
    trainable: Dict[str, Tensor],
    rebuild,
    train_sets: Sequence[LatentSet],
    train_labels: Sequence[int],
    rng: np.random.Generator,
    epochs: int,
    batch_size: int,
    lr: float,
):
    """Generic Adam-on-cross-entropy loop over per-sample graphs."""
    if len(train_sets) != len(train_labels):
        raise ValueError(
            f"latent/label count mismatch: {len(train_sets)} sets, {len(train_labels)} labels"
        )
    params = dict(trainable)
    moments = {
        name: (np.zeros(t.shape, np.float64), np.zeros(t.shape, np.float64))
        for name, t in params.items()
    }
    history: List[float] = []
    step = 0
    n = len(train_sets)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start : start + batch_size]
            model = rebuild(params)
            with GradientTape() as tape:
                total = None
                for i in batch:
                    loss_i = cross_entropy(forward_fn(model, train_sets[i]), train_labels[i])
                    loss_i = nm.reshape(loss_i, (1, 1))
                    total = loss_i if total is None else nm.add(total, loss_i)
                loss = nm.mul(total, 1.0 / len(batch))
            grads = backward(loss, tape)
            step += 1
            named = {name: grads[t] for name, t in params.items()}
            params, moments = adam_step(params, named, moments, step, lr)
            history.append(loss.item())
    return rebuild(params), history


def train_classifier(
    train_sets: Sequence[LatentSet],
    train_labels: Sequence[int],
    config: MpnnConfig,
    rng: np.random.Generator,
    test_sets: Optional[Sequence[LatentSet]] = None,
    test_labels: Optional[Sequence[int]] = None,
    epochs: int = 30,
    batch_size: int = 16,
    lr: float = 1e-3,
) -> Tuple[MpnnParams, Dict[str, float]]:
    """Adam on cross-entropy; returns trained weights and accuracy report."""
    init = init_mpnn(config, rng)

    def rebuild(table: Dict[str, Tensor]) -> MpnnParams:
        return MpnnParams(dict(table), init.b_edge)

    model, history = _train_logit_model(
        lambda m, z: mpnn_forward(z, m, config),
        init.table,
        rebuild,
        train_sets,
        train_labels,
        rng,
        epochs,
        batch_size,
        lr,
    )
    report = {
        "train_acc": accuracy(lambda z: mpnn_forward(z, model, config), train_sets, train_labels),
        "final_loss": history[-1] if history else math.nan,
    }
    if test_sets is not None and test_labels is not None:
        report["test_acc"] = accuracy(
            lambda z: mpnn_forward(z, model, config), test_sets, test_labels
        )
    return model, report


def train_mean_context_baseline(
    train_sets: Sequence[LatentSet],
    train_labels: Sequence[int],
    config: MpnnConfig,
    rng: np.random.Generator,
    test_sets: Optional[Sequence[LatentSet]] = None,
    test_labels: Optional[Sequence[int]] = None,
    epochs: int = 30,
    batch_size: int = 16,
    lr: float = 1e-3,
) -> Tuple[BaselineParams, Dict[str, float]]:
    """Same loop as the classifier but over pooled contexts only."""
    init = init_baseline(config, rng)

    def rebuild(table: Dict[str, Tensor]) -> BaselineParams:
        return BaselineParams(dict(table))

    model, history = _train_logit_model(
        lambda m, z: baseline_forward(z, m, config),
        init.table,
        rebuild,
        train_sets,
        train_labels,
        rng,
        epochs,
        batch_size,
        lr,
    )
    report = {
        "train_acc": accuracy(lambda z: baseline_forward(z, model, config), train_sets, train_labels),
        "final_loss": history[-1] if history else math.nan,
    }
    if test_sets is not None and test_labels is not None:
        report["test_acc"] = accuracy(
            lambda z: baseline_forward(z, model, config), test_sets, test_labels
        )
    return model, report


# --------------------------------------------------------------------------
# Persistence / reports


def save_classifier(path, params: MpnnParams, config: MpnnConfig) -> None:
    entries = {name: t.data for name, t in params.all_tensors().items()}
    entries["config"] = config.to_json().encode("utf-8")
    write_enft(path, entries)


def load_classifier(path) -> Tuple[MpnnParams, MpnnConfig]:
    entries = read_enft(path)
    if "config" not in entries:
        raise FormatError(f"{path}: classifier file has no config entry")
    config = MpnnConfig.from_json(entries["config"].decode("utf-8"))
    table = {}
    b_edge = None
    for name, value in entries.items():
        if name == "config":
            continue
        if name == "b_edge":
            b_edge = nm.tensor(value, config.dtype)
        else:
            table[name] = nm.tensor(value, config.dtype, requires_grad=True)
    if b_edge is None:
        raise FormatError(f"{path}: classifier file has no edge frequency matrix")
    return MpnnParams(table, b_edge), config


def write_predictions_csv(path, rows: Sequence[Tuple[str, int, int, np.ndarray]]) -> None:
    """Rows of (sample_id, label, prediction, logits)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        n_logits = len(rows[0][3]) if rows else 0
        writer.writerow(["sample_id", "label", "pred"] + [f"logit{i}" for i in range(n_logits)])
        for sid, label, pred, logits in rows:
            writer.writerow([sid, label, pred] + [f"{v:.8g}" for v in logits])
