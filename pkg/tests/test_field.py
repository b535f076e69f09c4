import math

import numpy as np
import pytest

import enf.numerics as nm
from enf.enft import FormatError
from enf.field import (
    ConfigError,
    EnfConfig,
    EnfParams,
    LatentTensors,
    attention_weights,
    default_sigma_att,
    field_forward,
    init_params,
    latent_tensors,
    load_checkpoint,
    rff_embed,
    save_checkpoint,
    value_transform,
)
from enf.geometry import (
    BiInvariantKind,
    GroupElement,
    GroupKind,
    act_on_point,
    group_inverse,
)
from enf.latents import LatentSet, act_on_latent_set

ROTO = BiInvariantKind.ROTO_TRANSLATION
TRANS = BiInvariantKind.TRANSLATION
NONE = BiInvariantKind.NONE


def small_config(kind=ROTO, k="all", sigma_att=6.0, dtype="f64", **kw):
    defaults = dict(
        kind=kind, d_latent=8, d_hidden=16, num_heads=2, rff_dim=16,
        sigma_q=1.0, sigma_v=2.0, sigma_att=sigma_att, k_nearest=k,
        out_channels=3, dtype=dtype,
    )
    defaults.update(kw)
    return EnfConfig(**defaults)


def random_set(kind, n=4, d=8, seed=0, box=0.7):
    rng = np.random.default_rng(seed)
    poses = np.concatenate(
        [rng.uniform(-box, box, (n, 2)), rng.uniform(0, 2 * math.pi, (n, 1))], axis=1
    )[:, : kind.pose_dim]
    return LatentSet.from_arrays(kind, poses, rng.normal(0, 1, (n, d)))


def random_group(kind, rng):
    if kind is TRANS:
        return GroupElement(GroupKind.TRANSLATION_2D, tuple(rng.uniform(-0.5, 0.5, 2)))
    return GroupElement(
        GroupKind.ROTO_TRANSLATION_2D, tuple(rng.uniform(-0.5, 0.5, 2)), rng.uniform(0, 2 * math.pi)
    )


class TestRffEmbed:
    def test_zero_input_gives_ones_and_zeros(self):
        b = nm.tensor(np.random.default_rng(0).normal(0, 1, (4, 2)), "f64")
        out = rff_embed(nm.zeros((1, 2), "f64"), b)
        assert np.allclose(out.data[0, :4], 1.0)
        assert np.allclose(out.data[0, 4:], 0.0)

    def test_quarter_period(self):
        b = nm.tensor([[1.0, 0.0]], "f64")
        out = rff_embed(nm.tensor([[0.25, 123.0]], "f64"), b)
        assert np.allclose(out.data[0], [0.0, 1.0], atol=1e-15)

    def test_norm_is_half_dimension(self):
        rng = np.random.default_rng(1)
        b = nm.tensor(rng.normal(0, 2, (8, 2)), "f64")
        for _ in range(10):
            u = nm.tensor(rng.uniform(-3, 3, (1, 2)), "f64")
            norm_sq = float((rff_embed(u, b).data ** 2).sum())
            assert norm_sq == pytest.approx(8.0, abs=1e-10)

    def test_dimension_mismatch_rejected(self):
        b = nm.tensor(np.zeros((4, 3)), "f64")
        with pytest.raises(nm.DimensionError):
            rff_embed(nm.zeros((1, 2), "f64"), b)


class TestAttentionWeights:
    def test_single_latent_gets_full_weight(self):
        config = small_config(k="all")
        params = init_params(config, np.random.default_rng(0))
        z = random_set(ROTO, n=1)
        idx, weights = attention_weights((0.1, -0.2), z, params, config)
        assert idx.tolist() == [0]
        assert np.allclose(weights, 1.0)

    def test_disabled_window_is_plain_softmax(self):
        config = small_config(k="all", sigma_att=0.0)
        params = init_params(config, np.random.default_rng(0))
        z = random_set(ROTO, n=5, seed=3)
        x = np.array([0.3, 0.1])
        _, weights = attention_weights(x, z, params, config)

        # Oracle: recompute logits per head with plain numpy and softmax them.
        from enf.geometry import bi_invariant

        a = np.stack([bi_invariant(ROTO, x, pt.pose) for pt in z.points])
        proj = 2 * math.pi * a @ params.b_q.data.T
        emb = np.concatenate([np.cos(proj), np.sin(proj)], axis=1)
        q = emb @ params.w_q.data.T  # [N, d_hidden]
        keys = z.context_matrix() @ params.w_k.data.T
        d_head = config.d_head
        for h in range(config.num_heads):
            sl = slice(h * d_head, (h + 1) * d_head)
            logits = (q[:, sl] * keys[:, sl]).sum(axis=1) / math.sqrt(d_head)
            e = np.exp(logits - logits.max())
            assert np.allclose(weights[h], e / e.sum(), atol=1e-10)

    def test_knn_selection_and_simplex(self):
        config = small_config(k=2)
        params = init_params(config, np.random.default_rng(0))
        z = random_set(ROTO, n=6, seed=4)
        x = np.array([0.0, 0.0])
        idx, weights = attention_weights(x, z, params, config)
        dists = np.linalg.norm(z.positions() - x, axis=1)
        assert set(idx.tolist()) == set(np.argsort(dists)[:2].tolist())
        assert np.allclose(weights.sum(axis=1), 1.0)

    def test_k_larger_than_n_rejected(self):
        config = small_config(k=9)
        params = init_params(config, np.random.default_rng(0))
        with pytest.raises(ConfigError, match="k_nearest"):
            field_forward(np.zeros((1, 2)), random_set(ROTO, n=4), params, config)


class TestKnnVersusFull:
    def test_k_equals_n_matches_full_attention(self):
        rng = np.random.default_rng(5)
        config_all = small_config(k="all", dtype="f32")
        config_kn = small_config(k=6, dtype="f32")
        params = init_params(config_all, np.random.default_rng(1))
        worst = 0.0
        for _ in range(100):
            z = random_set(ROTO, n=6, seed=int(rng.integers(1 << 30)))
            x = rng.uniform(-1, 1, (3, 2))
            full = field_forward(x, z, params, config_all).data
            trunc = field_forward(x, z, params, config_kn).data
            worst = max(worst, float(np.abs(full - trunc).max()))
        assert worst < 1e-6


class TestValueTransform:
    def test_zero_context_leaves_additive_term(self):
        config = small_config()
        params = init_params(config, np.random.default_rng(0))
        a_emb = nm.tensor(np.random.default_rng(1).normal(0, 1, (5, config.rff_dim)), "f64")
        c = nm.zeros((5, config.d_latent), "f64")
        out = value_transform(a_emb, c, params)
        expected = a_emb.data @ params.w_beta.data.T
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_identity_modulation_recovers_value_projection(self):
        config = small_config()
        params = init_params(config, np.random.default_rng(0))
        rng = np.random.default_rng(2)
        a_emb = nm.tensor(rng.normal(0, 1, (1, config.rff_dim)), "f64")
        gamma_row = a_emb.data @ params.w_gamma.data.T  # [1, d_hidden]
        # Rescale W_gamma so the gate becomes exactly one, and zero W_beta.
        scale = 1.0 / gamma_row[0]
        doctored = EnfParams(
            b_q=params.b_q,
            b_v=params.b_v,
            w_q=params.w_q,
            w_k=params.w_k,
            w_v=params.w_v,
            w_gamma=nm.tensor(params.w_gamma.data * scale[:, None], "f64", requires_grad=True),
            w_beta=nm.tensor(np.zeros_like(params.w_beta.data), "f64", requires_grad=True),
            w_o=params.w_o,
        )
        c = nm.tensor(rng.normal(0, 1, (1, config.d_latent)), "f64")
        out = value_transform(a_emb, c, doctored)
        assert np.allclose(out.data, c.data @ params.w_v.data.T, atol=1e-12)

    def test_matches_scalar_oracle(self):
        config = small_config()
        params = init_params(config, np.random.default_rng(0))
        rng = np.random.default_rng(3)
        a_emb = rng.normal(0, 1, (2, config.rff_dim))
        c = rng.normal(0, 1, (2, config.d_latent))
        out = value_transform(nm.tensor(a_emb, "f64"), nm.tensor(c, "f64"), params).data
        for r in range(2):
            for j in range(config.d_hidden):
                vc = sum(params.w_v.data[j, i] * c[r, i] for i in range(config.d_latent))
                g = sum(params.w_gamma.data[j, k] * a_emb[r, k] for k in range(config.rff_dim))
                b = sum(params.w_beta.data[j, k] * a_emb[r, k] for k in range(config.rff_dim))
                assert out[r, j] == pytest.approx(vc * g + b, rel=1e-9)


class TestFieldForward:
    def test_zero_output_projection(self):
        config = small_config()
        params = init_params(config, np.random.default_rng(0))
        params = EnfParams(
            **{**{k: v for k, v in params.all_tensors().items()},
               "w_o": nm.zeros(params.w_o.shape, "f64", requires_grad=True)}
        )
        out = field_forward(np.zeros((4, 2)), random_set(ROTO, n=1), params, config)
        assert np.array_equal(out.data, np.zeros((4, 3)))

    def test_permutation_invariance(self):
        config = small_config(k="all")
        params = init_params(config, np.random.default_rng(0))
        z = random_set(ROTO, n=5, seed=6)
        perm = np.random.default_rng(7).permutation(5)
        z_perm = LatentSet(tuple(z.points[i] for i in perm), z.d_latent, z.kind)
        x = np.random.default_rng(8).uniform(-1, 1, (6, 2))
        a = field_forward(x, z, params, config).data
        b = field_forward(x, z_perm, params, config).data
        assert np.allclose(a, b, atol=1e-12)

    @pytest.mark.parametrize("kind", [TRANS, ROTO])
    def test_steerability(self, kind):
        config = small_config(kind=kind, k=3, sigma_att=8.0)
        params = init_params(config, np.random.default_rng(0))
        rng = np.random.default_rng(9)
        worst = 0.0
        for _ in range(25):
            z = random_set(kind, n=4, seed=int(rng.integers(1 << 30)))
            g = random_group(kind, rng)
            x = rng.uniform(-1, 1, (4, 2))
            lhs = field_forward(act_on_point(group_inverse(g), x), z, params, config).data
            rhs = field_forward(x, act_on_latent_set(g, z), params, config).data
            worst = max(worst, float(np.abs(lhs - rhs).max()))
        assert worst < 1e-10

    @pytest.mark.parametrize("kind", [TRANS, ROTO])
    def test_full_field_bi_invariance(self, kind):
        config = small_config(kind=kind, k=3, sigma_att=8.0)
        params = init_params(config, np.random.default_rng(0))
        rng = np.random.default_rng(10)
        for _ in range(25):
            z = random_set(kind, n=4, seed=int(rng.integers(1 << 30)))
            g = random_group(kind, rng)
            x = rng.uniform(-1, 1, (4, 2))
            before = field_forward(x, z, params, config).data
            after = field_forward(act_on_point(g, x), act_on_latent_set(g, z), params, config).data
            assert np.abs(before - after).max() < 1e-10

    def test_geometry_free_kind_breaks_steerability(self):
        config = small_config(kind=NONE, k="all", sigma_att=0.0)
        params = init_params(config, np.random.default_rng(0))
        rng = np.random.default_rng(11)
        z = random_set(NONE, n=4, seed=12)
        g = GroupElement(GroupKind.ROTO_TRANSLATION_2D, (0.4, -0.3), 1.2)
        x = rng.uniform(-1, 1, (8, 2))
        lhs = field_forward(act_on_point(group_inverse(g), x), z, params, config).data
        rhs = field_forward(x, act_on_latent_set(g, z), params, config).data
        assert np.abs(lhs - rhs).max() > 1e-3

    def test_locality_with_strong_window(self):
        config = small_config(k="all", sigma_att=100.0)
        params = init_params(config, np.random.default_rng(0))
        poses = np.array([[0.05, 0.0, 0.3], [0.9, 0.9, 0.1], [-0.9, 0.9, 2.0], [0.9, -0.9, 1.0]])
        z = LatentSet.from_arrays(ROTO, poses, np.random.default_rng(13).normal(0, 1, (4, 8)))
        _, weights = attention_weights((0.0, 0.0), z, params, config)
        assert weights[:, 0].min() > 1.0 - 1e-3

    def test_kind_mismatch_rejected(self):
        config = small_config(kind=TRANS)
        params = init_params(config, np.random.default_rng(0))
        with pytest.raises(ConfigError, match="kind"):
            field_forward(np.zeros((1, 2)), random_set(ROTO), params, config)

    def test_width_mismatch_rejected(self):
        config = small_config()
        params = init_params(config, np.random.default_rng(0))
        with pytest.raises(ConfigError, match="d_latent"):
            field_forward(np.zeros((1, 2)), random_set(ROTO, d=5), params, config)

    def test_gradients_match_finite_differences(self):
        config = small_config(k=2, sigma_att=5.0)
        params = init_params(config, np.random.default_rng(0))
        rng = np.random.default_rng(14)
        coords = rng.uniform(-1, 1, (5, 2))
        target = rng.uniform(0, 1, (5, 3))
        from enf.fitting import mse_loss
        from enf.numerics import finite_difference_check

        table = dict(params.trainable())
        table["pose"] = nm.tensor(
            np.concatenate([rng.uniform(-0.5, 0.5, (3, 2)), rng.uniform(0, 6.28, (3, 1))], axis=1),
            "f64", requires_grad=True,
        )
        table["context"] = nm.tensor(rng.normal(0, 1, (3, 8)), "f64", requires_grad=True)
        names = tuple(params.trainable())

        def f(ps):
            p = EnfParams(b_q=params.b_q, b_v=params.b_v, **{k: ps[k] for k in names})
            z = LatentTensors(config.kind, ps["pose"], ps["context"])
            return mse_loss(field_forward(coords, z, p, config), target)

        report = finite_difference_check(f, table, h=1e-5, tol=1e-4)
        assert report.passed, str(report)


class TestChunkIndependence:
    def test_forward_is_independent_of_coordinate_chunking(self):
        # Per-coordinate reductions are independent, so evaluating chunks
        # and concatenating must match the single-call result bitwise.
        config = small_config(k=3, sigma_att=8.0, dtype="f32")
        params = init_params(config, np.random.default_rng(0))
        z = random_set(ROTO, n=5, seed=15)
        coords = np.random.default_rng(16).uniform(-1, 1, (9, 2))
        whole = field_forward(coords, z, params, config).data
        parts = np.concatenate(
            [field_forward(coords[:4], z, params, config).data,
             field_forward(coords[4:], z, params, config).data]
        )
        assert np.array_equal(whole, parts)


class TestConfigValidation:
    def test_head_divisibility(self):
        with pytest.raises(ConfigError, match="divisible"):
            small_config(d_hidden=15)

    def test_odd_rff_dim(self):
        with pytest.raises(ConfigError, match="even"):
            small_config(rff_dim=15)

    def test_default_window_strength_scales_with_latents(self):
        assert default_sigma_att(9) == 18.0


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        config = small_config(dtype="f32")
        params = init_params(config, np.random.default_rng(0))
        path = tmp_path / "model.enfc"
        save_checkpoint(path, params, config)
        loaded, config2 = load_checkpoint(path)
        assert config2 == config
        for name, t in params.all_tensors().items():
            assert np.array_equal(loaded.all_tensors()[name].data, t.data)
        assert not loaded.b_q.requires_grad
        assert loaded.w_q.requires_grad

    def test_missing_tensor_rejected(self, tmp_path):
        from enf.enft import read_enft, write_enft

        config = small_config()
        params = init_params(config, np.random.default_rng(0))
        path = tmp_path / "model.enfc"
        save_checkpoint(path, params, config)
        entries = read_enft(path)
        del entries["w_o"]
        write_enft(path, entries)
        with pytest.raises(FormatError, match="w_o"):
            load_checkpoint(path)

    def test_shape_disagreement_rejected(self, tmp_path):
        from enf.enft import read_enft, write_enft

        config = small_config()
        params = init_params(config, np.random.default_rng(0))
        path = tmp_path / "model.enfc"
        save_checkpoint(path, params, config)
        entries = read_enft(path)
        entries["w_o"] = np.zeros((2, 2))
        write_enft(path, entries)
        with pytest.raises(FormatError, match="shape"):
            load_checkpoint(path)
