"""Obtaining latent point clouds by gradient descent.

Two routes: meta-learning, which re-initializes latents every outer step
and adapts them with a handful of inner SGD steps before the shared
weights take an Adam step on the post-adaptation loss; and autodecoding,
which keeps one persistent latent set per training sample and descends
latents and weights simultaneously.  Inner adaptation runs under nested
gradient tapes, so with ``second_order`` enabled the outer gradient flows
through the inner updates; disabled, the adapted latents are treated as
constants (first-order approximation).

All loops are bitwise reproducible for a fixed seed: batches, coordinate
subsets, and pose jitter all come from one explicitly threaded generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nm
from .field import EnfConfig, EnfParams, LatentTensors, field_forward
from .geometry import BiInvariantKind
from .latents import LatentSet, init_grid_poses
from .numerics import GradientTape, NonFiniteError, Tensor, backward

__all__ = [
    "MetaLearnConfig",
    "AutodecodeConfig",
    "TrainState",
    "FitDivergenceError",
    "mse_loss",
    "psnr_from_mse",
    "adam_step",
    "init_train_state",
    "fresh_latents",
    "inner_adapt",
    "meta_train_step",
    "meta_train",
    "autodecode_init",
    "autodecode_step",
    "autodecode_train",
    "fit_latents_inference",
    "evaluate_reconstruction",
    "signals_from_images",
]

Signal = Tuple[np.ndarray, np.ndarray]  # (coords [P x 2], values [P x C])


class FitDivergenceError(Exception):
    """Training aborted on numeric blow-up, with step/sample diagnostics."""


@dataclass
class MetaLearnConfig:
    """Inner/outer loop hyperparameters for meta-learned fitting."""

    n_inner: int = 3
    eps_context: float = 30.0
    eps_pose: float = 1.0
    outer_lr: float = 1e-4
    second_order: bool = True
    batch_size: int = 4
    coords_per_step: int = 128
    pose_noise_std: float = 1e-3

    def __post_init__(self):
        if self.n_inner < 1:
            raise ValueError(f"n_inner must be >= 1, got {self.n_inner}")
        if self.eps_context < 0 or self.eps_pose < 0:
            raise ValueError("inner step sizes must be >= 0")


@dataclass
class AutodecodeConfig:
    """Joint latent/weight descent hyperparameters."""

    latent_lr: float = 1.0
    param_lr: float = 1e-4
    epochs: int = 10
    batch_size: int = 4
    coords_per_step: int = 128
    pose_noise_std: float = 1e-3

    def __post_init__(self):
        # Zero is allowed so a no-op step stays expressible; negative is not.
        if self.latent_lr < 0 or self.param_lr < 0:
            raise ValueError("learning rates must be >= 0")


@dataclass
class TrainState:
    """Weights plus Adam moments, step counter, rng, and loss trace."""

    params: EnfParams
    moments: Dict[str, Tuple[np.ndarray, np.ndarray]]
    step: int
    rng: np.random.Generator
    loss_history: List[float] = dc_field(default_factory=list)


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DIVERGENCE_GUARD = 1e6


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over coordinates and channels."""
    if not isinstance(target, Tensor):
        target = nm.tensor(np.asarray(target, dtype=np.float64), pred.dtype)
    return nm.mean(nm.square(nm.sub(pred, target)))

def psnr_from_mse(mse: float) -> float:
    """10 log10(1 / MSE) for signals in [0, 1]."""
    if mse <= 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def adam_step(
    params: Dict[str, Tensor],
    grads: Dict[str, Tensor],
    moments: Dict[str, Tuple[np.ndarray, np.ndarray]],
    step: int,
    lr: float,
) -> Tuple[Dict[str, Tensor], Dict[str, Tuple[np.ndarray, np.ndarray]]]:
    """One Adam update; returns fresh parameter tensors and moments."""
    new_params: Dict[str, Tensor] = {}
    new_moments: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    for name, p in params.items():
        g = grads[name].data.astype(np.float64)
        m_prev, v_prev = moments[name]
        m = ADAM_BETA1 * m_prev + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v_prev + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1**step)
        v_hat = v / (1.0 - ADAM_BETA2**step)
        update = p.data.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_params[name] = nm.tensor(update.astype(p.data.dtype), p.dtype, requires_grad=True)
        new_moments[name] = (m, v)
    return new_params, new_moments


def init_train_state(params: EnfParams, rng: np.random.Generator) -> TrainState:
    moments = {
        name: (np.zeros(t.shape, np.float64), np.zeros(t.shape, np.float64))
        for name, t in params.trainable().items()
    }
    return TrainState(params=params, moments=moments, step=0, rng=rng)


def fresh_latents(
    config: EnfConfig,
    n_latents: int,
    rng: np.random.Generator,
    pose_noise_std: float = 1e-3,
) -> LatentTensors:
    """Zero contexts on jittered grid poses: the inner loop's starting point."""
    poses = init_grid_poses(n_latents, config.kind, pose_noise_std, rng)
    pose_rows = []
    for p in poses:
        row = list(p.t)
        if config.kind is BiInvariantKind.ROTO_TRANSLATION:
            row.append(p.theta)
        pose_rows.append(row)
    pose_t = nm.tensor(np.asarray(pose_rows, dtype=np.float64), config.dtype, requires_grad=True)
    ctx_t = nm.zeros((n_latents, config.d_latent), config.dtype, requires_grad=True)
    return LatentTensors(config.kind, pose_t, ctx_t)


def _subsample(signal: Signal, m: int, rng: np.random.Generator) -> Signal:
    coords, values = signal
    if m >= coords.shape[0]:
        return coords, values
    idx = rng.choice(coords.shape[0], size=m, replace=False)
    return coords[idx], values[idx]


def _sgd_latent_update(z: LatentTensors, grads, eps_context: float, eps_pose: float) -> LatentTensors:
    context = z.context
    pose = z.pose
    if eps_context != 0.0:
        context = nm.sub(context, nm.mul(grads[z.context], eps_context))
    if eps_pose != 0.0:
        pose = nm.sub(pose, nm.mul(grads[z.pose], eps_pose))
    return LatentTensors(z.kind, pose, context)


def inner_adapt(
    signals: Sequence[Signal],
    z0: Sequence[LatentTensors],
    params: EnfParams,
    config: EnfConfig,
    cfg: MetaLearnConfig,
    rng: np.random.Generator,
    sample_ids: Optional[Sequence[str]] = None,
) -> List[LatentTensors]:
    """Adapt each sample's latents with ``n_inner`` plain SGD steps.

    Weights stay frozen; contexts move with ``eps_context`` and poses
    with ``eps_pose`` on the per-sample MSE over freshly subsampled
    coordinates each step.  Run inside an outer tape this trace is
    differentiable, which is what the second-order path relies on.
    """
    adapted = []
    for j, (signal, z) in enumerate(zip(signals, z0)):
        sid = sample_ids[j] if sample_ids else str(j)
        for step in range(cfg.n_inner):
            coords, values = _subsample(signal, cfg.coords_per_step, rng)
            try:
                with GradientTape() as tape:
                    pred = field_forward(coords, z, params, config)
                    loss = mse_loss(pred, values)
                grads = backward(loss, tape)
            except NonFiniteError as err:
                raise FitDivergenceError(
                    f"inner step {step} diverged on sample {sid}: {err}"
                ) from err
            z = _sgd_latent_update(z, grads, cfg.eps_context, cfg.eps_pose)
        adapted.append(z)
    return adapted


def meta_train_step(
    batch: Sequence[Signal],
    state: TrainState,
    config: EnfConfig,
    cfg: MetaLearnConfig,
    n_latents: int,
) -> Tuple[TrainState, float]:
    """One outer step: adapt latents per sample, Adam-update the weights.

    The outer loss is the reconstruction MSE of the adapted latents on
    independently re-sampled coordinates.  With ``second_order`` off the
    inner adaptation runs outside the outer tape, so adapted latents are
    constants with respect to the weight history.
    """
    params = state.params
    rng = state.rng
    with GradientTape() as outer:
        total: Optional[Tensor] = None
        for j, signal in enumerate(batch):
            z0 = [fresh_latents(config, n_latents, rng, cfg.pose_noise_std)]
            if cfg.second_order:
                (z_adapted,) = inner_adapt([signal], z0, params, config, cfg, rng, [str(j)])
            else:
                with outer.stop_recording():
                    (z_adapted,) = inner_adapt([signal], z0, params, config, cfg, rng, [str(j)])
            coords, values = _subsample(signal, cfg.coords_per_step, rng)
            pred = field_forward(coords, z_adapted, params, config)
            sample_loss = mse_loss(pred, values)
            total = sample_loss if total is None else nm.add(total, sample_loss)
        outer_loss = nm.mul(total, 1.0 / len(batch))
    loss_value = outer_loss.item()
    if not math.isfinite(loss_value) or loss_value > DIVERGENCE_GUARD:
        raise FitDivergenceError(f"outer loss {loss_value:g} at step {state.step} exceeds guard")
    grads = backward(outer_loss, outer)
    new_step = state.step + 1
    if cfg.outer_lr != 0.0:
        named_grads = {name: grads[t] for name, t in params.trainable().items()}
        new_trainable, new_moments = adam_step(
            params.trainable(), named_grads, state.moments, new_step, cfg.outer_lr
        )
        new_params = params.replace_trainable(new_trainable)
    else:
        new_params, new_moments = params, state.moments
    state.loss_history.append(loss_value)
    return (
        TrainState(new_params, new_moments, new_step, rng, state.loss_history),
        loss_value,
    )


def meta_train(
    signals: Sequence[Signal],
    config: EnfConfig,
    cfg: MetaLearnConfig,
    n_latents: int,
    steps: int,
    state: TrainState,
    on_step: Optional[Callable[[TrainState, int, float], bool]] = None,
) -> TrainState:
    """Run ``steps`` outer iterations; ``on_step`` may return True to stop early."""
    n = len(signals)
    for _ in range(steps):
        size = min(cfg.batch_size, n)
        chosen = state.rng.choice(n, size=size, replace=False)
        batch = [signals[i] for i in chosen]
        state, loss = meta_train_step(batch, state, config, cfg, n_latents)
        if on_step is not None and on_step(state, state.step, loss):
            break
    return state


# --------------------------------------------------------------------------
# Autodecoding


def autodecode_init(
    sample_ids: Sequence[str],
    config: EnfConfig,
    cfg: AutodecodeConfig,
    n_latents: int,
    rng: np.random.Generator,
) -> Dict[str, LatentTensors]:
    """One persistent latent set per training sample."""
    return {
        sid: fresh_latents(config, n_latents, rng, cfg.pose_noise_std) for sid in sample_ids
    }


def autodecode_step(
    batch_ids: Sequence[str],
    signals: Dict[str, Signal],
    state: TrainState,
    table: Dict[str, LatentTensors],
    config: EnfConfig,
    cfg: AutodecodeConfig,
) -> Tuple[TrainState, float]:
    """Simultaneous latent SGD and weight Adam step on the shared batch MSE.

    Latents outside the batch are untouched.
    """
    params = state.params
    rng = state.rng
    for sid in batch_ids:
        if sid not in table:
            raise FitDivergenceError(f"unknown sample id {sid!r} in autodecode batch")
    with GradientTape() as tape:
        total: Optional[Tensor] = None
        for sid in batch_ids:
            coords, values = _subsample(signals[sid], cfg.coords_per_step, rng)
            pred = field_forward(coords, table[sid], params, config)
            sample_loss = mse_loss(pred, values)
            total = sample_loss if total is None else nm.add(total, sample_loss)
        loss = nm.mul(total, 1.0 / len(batch_ids))
    loss_value = loss.item()
    if not math.isfinite(loss_value) or loss_value > DIVERGENCE_GUARD:
        raise FitDivergenceError(f"autodecode loss {loss_value:g} exceeds guard")
    grads = backward(loss, tape)
    for sid in batch_ids:
        table[sid] = _sgd_latent_update(table[sid], grads, cfg.latent_lr, cfg.latent_lr)
    new_step = state.step + 1
    named_grads = {name: grads[t] for name, t in params.trainable().items()}
    new_trainable, new_moments = adam_step(
        params.trainable(), named_grads, state.moments, new_step, cfg.param_lr
    )
    state.loss_history.append(loss_value)
    return (
        TrainState(
            params.replace_trainable(new_trainable),
            new_moments,
            new_step,
            rng,
            state.loss_history,
        ),
        loss_value,
    )


def autodecode_train(
    signals: Dict[str, Signal],
    config: EnfConfig,
    cfg: AutodecodeConfig,
    n_latents: int,
    state: TrainState,
    table: Optional[Dict[str, LatentTensors]] = None,
    on_step: Optional[Callable[[TrainState, int, float], bool]] = None,
) -> Tuple[TrainState, Dict[str, LatentTensors]]:
    """Epoch loop over all samples in shuffled batches."""
    ids = list(signals.keys())
    if table is None:
        table = autodecode_init(ids, config, cfg, n_latents, state.rng)
    stop = False
    for _ in range(cfg.epochs):
        order = state.rng.permutation(len(ids))
        for start in range(0, len(ids), cfg.batch_size):
            batch_ids = [ids[i] for i in order[start : start + cfg.batch_size]]
            state, loss = autodecode_step(batch_ids, signals, state, table, config, cfg)
            if on_step is not None and on_step(state, state.step, loss):
                stop = True
                break
        if stop:
            break
    return state, table


# --------------------------------------------------------------------------
# Inference-time fitting and evaluation


def fit_latents_inference(
    signal: Signal,
    params: EnfParams,
    config: EnfConfig,
    cfg: MetaLearnConfig,
    n_latents: int,
    n_steps: int,
    rng: np.random.Generator,
    sample_id: Optional[str] = None,
) -> Tuple[LatentSet, float]:
    """Fit a fresh latent set to one signal with frozen weights.

    Returns the latent set and the reconstruction PSNR over the full
    signal; ``n_steps == 0`` returns the initialization untouched.
    """
    z = fresh_latents(config, n_latents, rng, cfg.pose_noise_std)
    if n_steps > 0:
        run_cfg = MetaLearnConfig(
            n_inner=n_steps,
            eps_context=cfg.eps_context,
            eps_pose=cfg.eps_pose,
            outer_lr=cfg.outer_lr,
            second_order=False,
            batch_size=1,
            coords_per_step=cfg.coords_per_step,
            pose_noise_std=cfg.pose_noise_std,
        )
        (z,) = inner_adapt([signal], [z], params, config, run_cfg, rng, [sample_id or "signal"])
    coords, values = signal
    pred = field_forward(coords, z, params, config)
    final_mse = mse_loss(pred, values).item()
    from .field import tensors_to_latent_set

    return tensors_to_latent_set(z, sample_id), psnr_from_mse(final_mse)


def evaluate_reconstruction(
    signals: Sequence[Signal],
    params: EnfParams,
    config: EnfConfig,
    cfg: MetaLearnConfig,
    n_latents: int,
    rng: np.random.Generator,
    n_steps: Optional[int] = None,
) -> Tuple[float, List[float], List[LatentSet]]:
    """Fit every signal and report mean PSNR over full grids."""
    steps = cfg.n_inner if n_steps is None else n_steps
    psnrs: List[float] = []
    sets: List[LatentSet] = []
    for i, signal in enumerate(signals):
        z, value = fit_latents_inference(
            signal, params, config, cfg, n_latents, steps, rng, sample_id=str(i)
        )
        psnrs.append(value)
        sets.append(z)
    return float(np.mean(psnrs)), psnrs, sets


def signals_from_images(images, grid: np.ndarray) -> List[Signal]:
    """Pair each image's flat values with the shared coordinate grid."""
    return [(grid, img.flat_values()) for img in images]
