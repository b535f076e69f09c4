import math

import numpy as np
import pytest

import enf.numerics as nm
from enf.field import EnfConfig, LatentTensors, field_forward, init_params
from enf.fitting import (
    AutodecodeConfig,
    FitDivergenceError,
    MetaLearnConfig,
    TrainState,
    autodecode_init,
    autodecode_step,
    autodecode_train,
    evaluate_reconstruction,
    fit_latents_inference,
    fresh_latents,
    init_train_state,
    inner_adapt,
    meta_train,
    meta_train_step,
    mse_loss,
    psnr_from_mse,
    signals_from_images,
)
from enf.geometry import BiInvariantKind
from enf.data import ImageField, make_grid, synth_shapes

ROTO = BiInvariantKind.ROTO_TRANSLATION


def tiny_config(**kw):
    defaults = dict(
        kind=ROTO, d_latent=8, d_hidden=16, num_heads=2, rff_dim=16,
        sigma_q=1.0, sigma_v=2.0, sigma_att=8.0, k_nearest=2,
        out_channels=3, dtype="f32",
    )
    defaults.update(kw)
    return EnfConfig(**defaults)


def tiny_signal(seed=0, res=8):
    rng = np.random.default_rng(seed)
    img = synth_shapes(1, res, rng)[0][0]
    return make_grid(res, res), img.flat_values()


class TestInnerAdapt:
    def test_zero_step_sizes_leave_latents_untouched(self):
        config = tiny_config()
        params = init_params(config, np.random.default_rng(0))
        cfg = MetaLearnConfig(eps_context=0.0, eps_pose=0.0, coords_per_step=16)
        z0 = fresh_latents(config, 4, np.random.default_rng(1))
        (z,) = inner_adapt([tiny_signal()], [z0], params, config, cfg, np.random.default_rng(2))
        assert z.context is z0.context and z.pose is z0.pose

    def test_single_step_equals_manual_update(self):
        config = tiny_config()
        params = init_params(config, np.random.default_rng(0))
        cfg = MetaLearnConfig(n_inner=1, coords_per_step=16)
        signal = tiny_signal()
        z0 = fresh_latents(config, 4, np.random.default_rng(1))

        (auto,) = inner_adapt([signal], [z0], params, config, cfg, np.random.default_rng(7))

        # Manual single step with an identical generator state.
        rng = np.random.default_rng(7)
        idx = rng.choice(signal[0].shape[0], size=16, replace=False)
        from enf.numerics import GradientTape, backward

        with GradientTape() as tape:
            pred = field_forward(signal[0][idx], z0, params, config)
            loss = mse_loss(pred, signal[1][idx])
        grads = backward(loss, tape)
        manual_ctx = z0.context.data - cfg.eps_context * grads[z0.context].data
        manual_pose = z0.pose.data - cfg.eps_pose * grads[z0.pose].data
        assert np.array_equal(auto.context.data, manual_ctx)
        assert np.array_equal(auto.pose.data, manual_pose)

    def test_divergence_reports_sample_and_step(self):
        config = tiny_config()
        params = init_params(config, np.random.default_rng(0))
        cfg = MetaLearnConfig(eps_context=1e12, coords_per_step=16, n_inner=3)
        z0 = fresh_latents(config, 4, np.random.default_rng(1))
        with pytest.raises(FitDivergenceError, match=r"step \d+.*sample s7"):
            inner_adapt(
                [tiny_signal()], [z0], params, config, cfg, np.random.default_rng(2), ["s7"]
            )


class TestMetaTrainStep:
    def test_zero_outer_lr_keeps_params_but_reports_loss(self):
        config = tiny_config()
        params = init_params(config, np.random.default_rng(0))
        state = init_train_state(params, np.random.default_rng(1))
        cfg = MetaLearnConfig(outer_lr=0.0, batch_size=1, coords_per_step=16)
        new_state, loss = meta_train_step([tiny_signal()], state, config, cfg, 4)
        assert math.isfinite(loss) and loss > 0
        assert new_state.params is params
        assert new_state.step == 1

    def test_constant_image_loss_decreases(self):
        config = tiny_config()
        params = init_params(config, np.random.default_rng(0))
        state = init_train_state(params, np.random.default_rng(1))
        cfg = MetaLearnConfig(batch_size=1, coords_per_step=32, outer_lr=1e-3)
        grid = make_grid(8, 8)
        constant = (grid, np.full((64, 3), 0.25))
        first = None
        for _ in range(50):
            state, loss = meta_train_step([constant], state, config, cfg, 4)
            first = first if first is not None else loss
        assert state.loss_history[-1] < first

    def test_first_and_second_order_updates_differ(self):
        config = tiny_config()
        signal = tiny_signal(seed=3)
        results = {}
        for order in (True, False):
            params = init_params(config, np.random.default_rng(0))
            state = init_train_state(params, np.random.default_rng(1))
            cfg = MetaLearnConfig(second_order=order, batch_size=1, coords_per_step=16)
            state, _ = meta_train_step([signal], state, config, cfg, 4)
            results[order] = state.params.w_q.data
        assert not np.array_equal(results[True], results[False])

    def test_fixed_seed_is_bitwise_reproducible(self):
        config = tiny_config()
        signals = [tiny_signal(seed=s) for s in (0, 1)]

        def run():
            params = init_params(config, np.random.default_rng(0))
            state = init_train_state(params, np.random.default_rng(1))
            cfg = MetaLearnConfig(batch_size=2, coords_per_step=16)
            state = meta_train(signals, config, cfg, 4, 3, state)
            return state.params.w_v.data

        assert np.array_equal(run(), run())


class TestAutodecode:
    def test_zero_rates_change_nothing(self):
        config = tiny_config()
        params = init_params(config, np.random.default_rng(0))
        state = init_train_state(params, np.random.default_rng(1))
        cfg = AutodecodeConfig(latent_lr=0.0, param_lr=0.0, coords_per_step=16)
        signals = {"a": tiny_signal(0)}
        table = autodecode_init(["a"], config, cfg, 4, np.random.default_rng(2))
        before_ctx = table["a"].context.data
        state2, _ = autodecode_step(["a"], signals, state, table, config, cfg)
        assert np.array_equal(table["a"].context.data, before_ctx)
        for name, t in state2.params.trainable().items():
            assert np.array_equal(t.data, params.trainable()[name].data)

    def test_loss_decreases_on_toy_set(self):
        config = tiny_config()
        params = init_params(config, np.random.default_rng(0))
        state = init_train_state(params, np.random.default_rng(1))
        cfg = AutodecodeConfig(latent_lr=1.0, param_lr=1e-3, epochs=25,
                               batch_size=4, coords_per_step=32)
        signals = {str(i): tiny_signal(i) for i in range(4)}
        state, table = autodecode_train(signals, config, cfg, 4, state)
        assert state.loss_history[-1] < state.loss_history[0]

    def test_samples_outside_batch_untouched(self):
        config = tiny_config()
        params = init_params(config, np.random.default_rng(0))
        state = init_train_state(params, np.random.default_rng(1))
        cfg = AutodecodeConfig(coords_per_step=16)
        signals = {"a": tiny_signal(0), "b": tiny_signal(1)}
        table = autodecode_init(["a", "b"], config, cfg, 4, np.random.default_rng(2))
        untouched = table["b"]
        autodecode_step(["a"], signals, state, table, config, cfg)
        assert table["b"] is untouched

    def test_unknown_sample_id_rejected(self):
        config = tiny_config()
        params = init_params(config, np.random.default_rng(0))
        state = init_train_state(params, np.random.default_rng(1))
        cfg = AutodecodeConfig(coords_per_step=16)
        signals = {"a": tiny_signal(0)}
        table = autodecode_init(["a"], config, cfg, 4, np.random.default_rng(2))
        with pytest.raises(FitDivergenceError, match="ghost"):
            autodecode_step(["ghost"], signals, state, table, config, cfg)


class TestInferenceFitting:
    def test_zero_steps_returns_initialization(self):
        config = tiny_config()
        params = init_params(config, np.random.default_rng(0))
        cfg = MetaLearnConfig(coords_per_step=16)
        z, db = fit_latents_inference(
            tiny_signal(), params, config, cfg, 4, 0, np.random.default_rng(3), "s"
        )
        assert np.array_equal(z.context_matrix(), np.zeros((4, 8)))
        assert math.isfinite(db)

    def test_fitting_improves_over_initialization(self):
        # The >40 dB black-image bar needs a trained checkpoint and lives in
        # the acceptance suite; at random weights fitting must still help.
        config = tiny_config()
        params = init_params(config, np.random.default_rng(0))
        cfg = MetaLearnConfig(coords_per_step=64)
        grid = make_grid(8, 8)
        black = (grid, np.zeros((64, 3)))
        _, db0 = fit_latents_inference(black, params, config, cfg, 4, 0, np.random.default_rng(4), "b")
        _, db = fit_latents_inference(black, params, config, cfg, 4, 60, np.random.default_rng(4), "b")
        assert db > db0 + 2.0

    def test_evaluate_reconstruction_reports_per_sample(self):
        config = tiny_config()
        params = init_params(config, np.random.default_rng(0))
        cfg = MetaLearnConfig(coords_per_step=16)
        signals = [tiny_signal(s) for s in range(3)]
        mean_db, per_sample, sets = evaluate_reconstruction(
            signals, params, config, cfg, 4, np.random.default_rng(5)
        )
        assert len(per_sample) == 3 and len(sets) == 3
        assert mean_db == pytest.approx(np.mean(per_sample))
        assert all(z.n == 4 for z in sets)


class TestHelpers:
    def test_psnr_conversions(self):
        assert psnr_from_mse(1.0) == pytest.approx(0.0)
        assert psnr_from_mse(0.01) == pytest.approx(20.0)
        assert psnr_from_mse(0.0) == math.inf

    def test_mse_loss_matches_numpy(self):
        rng = np.random.default_rng(6)
        pred = nm.tensor(rng.uniform(0, 1, (5, 3)), "f64")
        target = rng.uniform(0, 1, (5, 3))
        assert mse_loss(pred, target).item() == pytest.approx(
            float(((pred.data - target) ** 2).mean())
        )

    def test_signals_from_images(self):
        img = ImageField(np.zeros((4, 4, 3)))
        grid = make_grid(4, 4)
        ((coords, values),) = signals_from_images([img], grid)
        assert coords.shape == (16, 2) and values.shape == (16, 3)
