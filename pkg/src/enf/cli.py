"""Command-line entry point wiring every workflow together.

One JSON config file drives training (see ``RunConfig``); every
subcommand takes ``--seed`` and is bitwise reproducible under it.
Training subcommands write CSV loss logs (step,loss,psnr) and ENFT
checkpoints; everything downstream consumes those artifacts.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from typing import List, Optional, Tuple

import click
import numpy as np

from .data import (
    ImageField,
    load_corpus,
    load_ppm,
    make_grid,
    save_ppm,
    synth_shapes,
    write_corpus,
)
from .field import (
    EnfConfig,
    default_sigma_att,
    field_forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .fitting import (
    AutodecodeConfig,
    MetaLearnConfig,
    autodecode_train,
    fit_latents_inference,
    init_train_state,
    meta_train,
    psnr_from_mse,
    signals_from_images,
)
from .geometry import BiInvariantKind, GroupElement, GroupKind
from .latents import (
    LatentSet,
    act_on_latent_set,
    half_plane,
    load_latents,
    save_latents,
    stitch,
)

__all__ = ["main", "eval_psnr", "RunConfig", "load_run_config"]


def eval_psnr(reconstruction: ImageField, target: ImageField) -> float:
    """10 log10(1 / MSE) between two fields of identical shape."""
    if reconstruction.values.shape != target.values.shape:
        raise ValueError(
            f"shape mismatch: {reconstruction.values.shape} vs {target.values.shape}"
        )
    mse = float(np.mean((reconstruction.values - target.values) ** 2))
    return psnr_from_mse(mse)


# --------------------------------------------------------------------------
# Run configuration


@dataclass
class RunConfig:
    """Validated view of a training config file plus overrides."""

    seed: int
    n_latents: int
    steps: int
    enf: EnfConfig
    meta: MetaLearnConfig
    auto: AutodecodeConfig
    train_manifest: Optional[str]
    test_manifest: Optional[str]


def _apply_overrides(raw: dict, overrides: Tuple[str, ...]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise click.BadParameter(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return raw


def load_run_config(path, overrides: Tuple[str, ...] = ()) -> RunConfig:
    """Parse and validate a run config, failing fast with the offending key."""
    with open(path) as fh:
        raw = json.load(fh)
    raw = _apply_overrides(raw, overrides)

    def section(name, cls, defaults=None):
        data = dict(defaults or {})
        data.update(raw.get(name, {}))
        try:
            return cls(**data)
        except TypeError as err:
            bad = str(err).split("'")
            key = bad[1] if len(bad) > 1 else str(err)
            raise click.ClickException(f"config section {name!r}: invalid key {key!r}") from None
        except Exception as err:
            raise click.ClickException(f"config section {name!r}: {err}") from None

    n_latents = int(raw.get("n_latents", 16))
    enf_raw = dict(raw.get("enf", {}))
    if enf_raw.get("sigma_att") == "auto":
        enf_raw["sigma_att"] = default_sigma_att(n_latents)
    raw["enf"] = enf_raw
    enf = section("enf", EnfConfig)
    meta = section("meta", MetaLearnConfig)
    auto = section("auto", AutodecodeConfig)
    data = raw.get("data", {})
    return RunConfig(
        seed=int(raw.get("seed", 0)),
        n_latents=n_latents,
        steps=int(raw.get("steps", 1000)),
        enf=enf,
        meta=meta,
        auto=auto,
        train_manifest=data.get("train_manifest"),
        test_manifest=data.get("test_manifest"),
    )


def _log_writer(path):
    if path is None:
        return None, lambda *a: None
    fh = open(path, "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(["step", "loss", "psnr"])

    def write(step, loss):
        writer.writerow([step, f"{loss:.8g}", f"{psnr_from_mse(loss):.4f}"])
        fh.flush()

    return fh, write


def _load_signals(manifest_path):
    corpus = load_corpus(manifest_path)
    return corpus, signals_from_images(corpus.images, corpus.grid)


def _field_from_array(values: np.ndarray, height: int, width: int) -> ImageField:
    return ImageField(np.clip(values, 0.0, 1.0).reshape(height, width, -1))


# --------------------------------------------------------------------------
# CLI


@click.group()
def main():
    """Equivariant neural fields: fit, edit, decode, classify, serve."""


@main.command("synth-data")
@click.option("--n", type=int, required=True, help="Number of samples.")
@click.option("--res", type=int, required=True, help="Image resolution (square).")
@click.option("--out", type=click.Path(), required=True, help="Output directory.")
@click.option("--seed", type=int, default=0)
@click.option("--prefix", default="sample")
def synth_data_cmd(n, res, out, seed, prefix):
    """Write a synthetic shape corpus (PPMs + manifest.json)."""
    samples = synth_shapes(n, res, np.random.default_rng(seed))
    manifest = write_corpus(out, samples, prefix=prefix)
    click.echo(f"wrote {n} samples at {res}x{res} to {manifest}")


@main.command("fit-meta")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True, help="Checkpoint path (.enfc).")
@click.option("--log", "log_path", type=click.Path(), default=None, help="CSV loss log.")
@click.option("--ckpt-every", type=int, default=500)
@click.option("--set", "overrides", multiple=True, help="Override config key, e.g. enf.d_hidden=64.")
def fit_meta_cmd(config_path, out, log_path, ckpt_every, overrides):
    """Meta-learn the field on the configured corpus."""
    run = load_run_config(config_path, overrides)
    if run.train_manifest is None:
        raise click.ClickException("config data.train_manifest is required for fit-meta")
    _, signals = _load_signals(run.train_manifest)
    params = init_params(run.enf, np.random.default_rng(run.seed))
    state = init_train_state(params, np.random.default_rng(run.seed + 1))
    fh, write_log = _log_writer(log_path)

    def on_step(st, step, loss):
        write_log(step, loss)
        if ckpt_every and step % ckpt_every == 0:
            save_checkpoint(out, st.params, run.enf)
        return False

    try:
        state = meta_train(signals, run.enf, run.meta, run.n_latents, run.steps, state, on_step)
    finally:
        if fh:
            fh.close()
    save_checkpoint(out, state.params, run.enf)
    click.echo(f"trained {state.step} steps, final loss {state.loss_history[-1]:.6f}; saved {out}")


@main.command("fit-auto")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True, help="Checkpoint path (.enfc).")
@click.option("--latents-out", type=click.Path(), default=None, help="Per-sample latents (.enfl).")
@click.option("--log", "log_path", type=click.Path(), default=None)
@click.option("--set", "overrides", multiple=True)
def fit_auto_cmd(config_path, out, latents_out, log_path, overrides):
    """Autodecode: descend per-sample latents and weights jointly."""
    run = load_run_config(config_path, overrides)
    if run.train_manifest is None:
        raise click.ClickException("config data.train_manifest is required for fit-auto")
    _, signals_list = _load_signals(run.train_manifest)
    signals = {str(i): s for i, s in enumerate(signals_list)}
    params = init_params(run.enf, np.random.default_rng(run.seed))
    state = init_train_state(params, np.random.default_rng(run.seed + 1))
    fh, write_log = _log_writer(log_path)

    def on_step(st, step, loss):
        write_log(step, loss)
        return False

    try:
        state, table = autodecode_train(
            signals, run.enf, run.auto, run.n_latents, state, on_step=on_step
        )
    finally:
        if fh:
            fh.close()
    save_checkpoint(out, state.params, run.enf)
    if latents_out:
        from .field import tensors_to_latent_set

        sets = [tensors_to_latent_set(table[sid], sample_id=sid) for sid in sorted(signals)]
        save_latents(latents_out, sets)
        click.echo(f"saved {len(sets)} latent sets to {latents_out}")
    click.echo(f"trained {state.step} steps, final loss {state.loss_history[-1]:.6f}; saved {out}")


@main.command("encode")
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--manifest", type=click.Path(exists=True), default=None)
@click.option("--image", "image_path", type=click.Path(exists=True), default=None)
@click.option("--out", type=click.Path(), required=True, help="Latent file (.enfl).")
@click.option("--steps", type=int, default=3, help="Inner fitting steps per sample.")
@click.option("--n-latents", type=int, default=16)
@click.option("--coords-per-step", type=int, default=128)
@click.option("--seed", type=int, default=0)
def encode_cmd(ckpt, manifest, image_path, out, steps, n_latents, coords_per_step, seed):
    """Fit latents for a corpus or a single image with frozen weights."""
    if (manifest is None) == (image_path is None):
        raise click.ClickException("pass exactly one of --manifest or --image")
    params, config = load_checkpoint(ckpt)
    cfg = MetaLearnConfig(coords_per_step=coords_per_step)
    rng = np.random.default_rng(seed)
    sets: List[LatentSet] = []
    if manifest:
        corpus, signals = _load_signals(manifest)
        for i, signal in enumerate(signals):
            z, db = fit_latents_inference(
                signal, params, config, cfg, n_latents, steps, rng, sample_id=str(i)
            )
            sets.append(z)
            click.echo(f"sample {i}: {db:.2f} dB")
    else:
        image = load_ppm(image_path)
        grid = make_grid(image.height, image.width)
        z, db = fit_latents_inference(
            (grid, image.flat_values()), params, config, cfg, n_latents, steps, rng,
            sample_id=os.path.basename(image_path),
        )
        sets.append(z)
        click.echo(f"{image_path}: {db:.2f} dB")
    save_latents(out, sets)
    click.echo(f"saved {len(sets)} latent set(s) to {out}")


@main.command("decode")
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--latents", "latents_path", type=click.Path(exists=True), required=True)
@click.option("--res", type=int, nargs=2, required=True, help="Height width.")
@click.option("--out", type=click.Path(), required=True, help="Output PPM.")
@click.option("--index", type=int, default=0, help="Latent set index in the file.")
def decode_cmd(ckpt, latents_path, res, out, index):
    """Decode a latent set to an image at any resolution."""
    params, config = load_checkpoint(ckpt)
    sets = load_latents(latents_path)
    if not 0 <= index < len(sets):
        raise click.ClickException(f"latent index {index} out of range ({len(sets)} sets)")
    height, width = res
    values = field_forward(make_grid(height, width), sets[index], params, config).data
    save_ppm(_field_from_array(values, height, width), out)
    click.echo(f"decoded set {index} at {height}x{width} to {out}")


@main.command("transform")
@click.option("--latents", "latents_path", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--tx", type=float, default=0.0)
@click.option("--ty", type=float, default=0.0)
@click.option("--theta", type=float, default=0.0)
@click.option("--index", type=int, default=None, help="Transform one set (default: all).")
def transform_cmd(latents_path, out, tx, ty, theta, index):
    """Apply a group action g to latent sets: poses move, contexts ride."""
    sets = load_latents(latents_path)
    result = []
    for i, z in enumerate(sets):
        if index is not None and i != index:
            result.append(z)
            continue
        if z.kind is BiInvariantKind.ROTO_TRANSLATION:
            g = GroupElement(GroupKind.ROTO_TRANSLATION_2D, (tx, ty), theta)
        else:
            if theta != 0.0:
                click.echo(f"warning: set {i} kind {z.kind.value} ignores theta", err=True)
            g = GroupElement(GroupKind.TRANSLATION_2D, (tx, ty))
        result.append(act_on_latent_set(g, z))
    save_latents(out, result)
    click.echo(f"transformed {len(result) if index is None else 1} set(s) to {out}")


@main.command("stitch")
@click.option("--a", "path_a", type=click.Path(exists=True), required=True)
@click.option("--b", "path_b", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--normal", default="1,0", help="Half-plane normal 'nx,ny'.")
@click.option("--offset", type=float, default=0.0)
@click.option("--index-a", type=int, default=0)
@click.option("--index-b", type=int, default=0)
def stitch_cmd(path_a, path_b, out, normal, offset, index_a, index_b):
    """Keep A's latents where dot(normal, pos) >= offset, B's elsewhere."""
    try:
        nx, ny = (float(v) for v in normal.split(","))
    except ValueError:
        raise click.BadParameter(f"normal {normal!r} is not 'nx,ny'")
    za = load_latents(path_a)[index_a]
    zb = load_latents(path_b)[index_b]
    merged = stitch(za, zb, half_plane((nx, ny), offset))
    save_latents(out, [merged])
    click.echo(f"stitched {za.n}+{zb.n} -> {merged.n} latents to {out}")


@main.command("eval-psnr")
@click.option("--a", "path_a", type=click.Path(exists=True), required=True)
@click.option("--b", "path_b", type=click.Path(exists=True), required=True)
def eval_psnr_cmd(path_a, path_b):
    """PSNR between two images, in dB."""
    value = eval_psnr(load_ppm(path_a), load_ppm(path_b))
    click.echo("inf" if math.isinf(value) else f"{value:.4f}")


@main.command("gradcheck")
@click.option("--seed", type=int, default=0)
@click.option("--tol", type=float, default=1e-4)
def gradcheck_cmd(seed, tol):
    """Check all field gradients against central finite differences."""
    report = _run_gradcheck(seed, tol)
    click.echo(str(report))
    if not report.passed:
        raise SystemExit(1)


def _run_gradcheck(seed: int, tol: float):
    import enf.numerics as nm
    from .field import EnfParams, LatentTensors
    from .fitting import mse_loss
    from .numerics import finite_difference_check

    rng = np.random.default_rng(seed)
    config = EnfConfig(
        kind=BiInvariantKind.ROTO_TRANSLATION,
        d_latent=8,
        d_hidden=16,
        num_heads=2,
        rff_dim=16,
        sigma_att=4.0,
        k_nearest="all",
        out_channels=3,
        dtype="f64",
    )
    params = init_params(config, rng)
    coords = make_grid(4, 4)
    target = rng.uniform(0, 1, size=(16, 3))
    trainable_names = tuple(params.trainable())
    table = dict(params.trainable())
    table["pose"] = nm.tensor(
        np.concatenate(
            [rng.uniform(-0.5, 0.5, (2, 2)), rng.uniform(0, 2 * math.pi, (2, 1))], axis=1
        ),
        "f64",
        requires_grad=True,
    )
    table["context"] = nm.tensor(rng.normal(0, 1, (2, 8)), "f64", requires_grad=True)

    def f(ps):
        p = EnfParams(b_q=params.b_q, b_v=params.b_v, **{k: ps[k] for k in trainable_names})
        z = LatentTensors(config.kind, ps["pose"], ps["context"])
        return mse_loss(field_forward(coords, z, p, config), target)

    return finite_difference_check(f, table, h=1e-5, tol=tol)


@main.command("proptest")
@click.option("--seed", type=int, default=0)
def proptest_cmd(seed):
    """Run the fast invariant suites and report PASS/FAIL per property."""
    failures = 0
    for name, ok, detail in _run_property_suites(seed):
        click.echo(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
        failures += 0 if ok else 1
    if failures:
        raise SystemExit(1)


def _run_property_suites(seed: int):
    import enf.numerics as nm
    from .geometry import act_on_point, bi_invariant, group_inverse, group_product

    rng = np.random.default_rng(seed)
    results = []

    # Bi-invariance of attributes, plus the deliberate failure of NONE.
    worst = {k: 0.0 for k in BiInvariantKind}
    for kind in (BiInvariantKind.TRANSLATION, BiInvariantKind.ROTO_TRANSLATION):
        gk = GroupKind.TRANSLATION_2D if kind is BiInvariantKind.TRANSLATION else GroupKind.ROTO_TRANSLATION_2D
        for _ in range(1000):
            g = GroupElement(gk, tuple(rng.uniform(-1, 1, 2)), rng.uniform(0, 2 * math.pi))
            p = GroupElement(kind.pose_kind, tuple(rng.uniform(-1, 1, 2)), rng.uniform(0, 2 * math.pi))
            x = rng.uniform(-1, 1, 2)
            from .geometry import act_on_pose

            d = np.abs(
                bi_invariant(kind, x, p)
                - bi_invariant(kind, act_on_point(g, x), act_on_pose(g, p))
            ).max()
            worst[kind] = max(worst[kind], float(d))
        results.append(
            (f"bi-invariance[{kind.value}]", worst[kind] < 1e-10, f"max dev {worst[kind]:.2e}")
        )

    # Steerability of the decoded field, window active; NONE must break.
    from .field import LatentTensors
    from .latents import act_on_latent_set

    for kind, should_hold in (
        (BiInvariantKind.TRANSLATION, True),
        (BiInvariantKind.ROTO_TRANSLATION, True),
        (BiInvariantKind.NONE, False),
    ):
        config = EnfConfig(
            kind=kind, d_latent=8, d_hidden=16, num_heads=2, rff_dim=16,
            sigma_att=6.0, k_nearest=3, out_channels=2, dtype="f64",
        )
        params = init_params(config, np.random.default_rng(seed + 1))
        worst_dev = 0.0
        for _ in range(100):
            poses = rng.uniform(-0.7, 0.7, (4, kind.pose_dim))
            z = LatentSet.from_arrays(kind, poses, rng.normal(0, 1, (4, 8)))
            gk = GroupKind.TRANSLATION_2D if kind is BiInvariantKind.TRANSLATION else GroupKind.ROTO_TRANSLATION_2D
            theta = 0.0 if gk is GroupKind.TRANSLATION_2D else rng.uniform(0, 2 * math.pi)
            g = GroupElement(gk, tuple(rng.uniform(-0.4, 0.4, 2)), theta)
            x = rng.uniform(-1, 1, (3, 2))
            lhs = field_forward(act_on_point(group_inverse(g), x), z, params, config)
            rhs = field_forward(x, act_on_latent_set(g, z), params, config)
            worst_dev = max(worst_dev, float(np.abs(lhs.data - rhs.data).max()))
        ok = worst_dev < 1e-10 if should_hold else worst_dev > 1e-3
        results.append(
            (
                f"steerability[{kind.value}]{'' if should_hold else ' (negative)'}",
                ok,
                f"max dev {worst_dev:.2e}",
            )
        )

    # Softmax rows sum to one.
    logits = rng.normal(0, 5, (50, 7))
    rows = nm.softmax_with_bias(nm.tensor(logits, "f64"), nm.zeros((50, 7), "f64")).data.sum(axis=1)
    dev = float(np.abs(rows - 1).max())
    results.append(("softmax-rows-sum-to-one", dev < 1e-6, f"max dev {dev:.2e}"))

    # Truncation at k = N reproduces full attention.
    config_all = EnfConfig(
        kind=BiInvariantKind.ROTO_TRANSLATION, d_latent=8, d_hidden=16, num_heads=2,
        rff_dim=16, sigma_att=6.0, k_nearest="all", out_channels=2, dtype="f32",
    )
    config_kn = EnfConfig(**{**config_all.__dict__, "k_nearest": 5})
    params = init_params(config_all, np.random.default_rng(seed + 2))
    worst_dev = 0.0
    for _ in range(100):
        poses = rng.uniform(-0.7, 0.7, (5, 3))
        z = LatentSet.from_arrays(BiInvariantKind.ROTO_TRANSLATION, poses, rng.normal(0, 1, (5, 8)))
        x = rng.uniform(-1, 1, (4, 2))
        full = field_forward(x, z, params, config_all)
        trunc = field_forward(x, z, params, config_kn)
        worst_dev = max(worst_dev, float(np.abs(full.data - trunc.data).max()))
    results.append(("knn-equals-full-at-k=N", worst_dev < 1e-6, f"max dev {worst_dev:.2e}"))

    # Group axioms.
    worst_dev = 0.0
    for _ in range(1000):
        g, h, k = (
            GroupElement(
                GroupKind.ROTO_TRANSLATION_2D, tuple(rng.uniform(-1, 1, 2)), rng.uniform(0, 2 * math.pi)
            )
            for _ in range(3)
        )
        left = group_product(group_product(g, h), k)
        right = group_product(g, group_product(h, k))
        worst_dev = max(worst_dev, float(np.abs(left.position - right.position).max()))
        ident = group_product(g, group_inverse(g))
        worst_dev = max(worst_dev, float(np.abs(ident.position).max()))
    results.append(("group-axioms", worst_dev < 1e-12, f"max dev {worst_dev:.2e}"))
    return results


@main.command("train-classifier")
@click.option("--latents", "latents_path", type=click.Path(exists=True), required=True)
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--test-latents", type=click.Path(exists=True), default=None)
@click.option("--test-manifest", type=click.Path(exists=True), default=None)
@click.option("--layers", type=int, default=2)
@click.option("--hidden", type=int, default=32)
@click.option("--epochs", type=int, default=30)
@click.option("--lr", type=float, default=1e-3)
@click.option("--seed", type=int, default=0)
def train_classifier_cmd(
    latents_path, manifest, out, test_latents, test_manifest, layers, hidden, epochs, lr, seed
):
    """Train the invariant message-passing classifier on latent sets."""
    from .downstream import MpnnConfig, save_classifier, train_classifier

    sets = load_latents(latents_path)
    corpus = load_corpus(manifest)
    if len(sets) != len(corpus.labels):
        raise click.ClickException(
            f"{len(sets)} latent sets but {len(corpus.labels)} labels in manifest"
        )
    test_sets = test_labels = None
    if test_latents and test_manifest:
        test_sets = load_latents(test_latents)
        test_labels = load_corpus(test_manifest).labels
    config = MpnnConfig(
        d_latent=sets[0].d_latent,
        n_classes=len(corpus.classes),
        kind=sets[0].kind,
        n_layers=layers,
        d_node_hidden=hidden,
    )
    model, report = train_classifier(
        sets, corpus.labels, config, np.random.default_rng(seed),
        test_sets=test_sets, test_labels=test_labels, epochs=epochs, lr=lr,
    )
    save_classifier(out, model, config)
    click.echo(json.dumps(report, indent=1, sort_keys=True))
    click.echo(f"saved classifier to {out}")


@main.command("classify")
@click.option("--classifier", "classifier_path", type=click.Path(exists=True), required=True)
@click.option("--latents", "latents_path", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), default=None, help="Predictions CSV.")
def classify_cmd(classifier_path, latents_path, out):
    """Predict classes for latent sets; write a predictions CSV."""
    from .downstream import load_classifier, mpnn_logits, write_predictions_csv

    params, config = load_classifier(classifier_path)
    sets = load_latents(latents_path)
    rows = []
    for i, z in enumerate(sets):
        logits = mpnn_logits(z, params, config)
        pred = int(np.argmax(logits))
        rows.append((z.sample_id or str(i), -1, pred, logits))
        click.echo(f"{z.sample_id or i}: class {pred}")
    if out:
        write_predictions_csv(out, rows)
        click.echo(f"wrote {out}")


@main.command("serve")
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--latents", "latent_paths", type=click.Path(exists=True), multiple=True)
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8080)
@click.option("--max-res", type=int, default=256)
@click.option("--ui-dir", type=click.Path(exists=True), default=None)
def serve_cmd(ckpt, latent_paths, host, port, max_res, ui_dir):
    """Serve the latent editor API (and the UI, when built)."""
    import uvicorn

    from .serve import create_app

    app = create_app(ckpt, list(latent_paths), max_resolution=max_res, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
