import math

import numpy as np
import pytest

from enf.downstream import (
    MpnnConfig,
    baseline_forward,
    cross_entropy,
    init_baseline,
    init_mpnn,
    load_classifier,
    mpnn_forward,
    mpnn_logits,
    relative_pose_invariant,
    save_classifier,
    train_classifier,
    write_predictions_csv,
)
from enf.geometry import (
    BiInvariantKind,
    GroupElement,
    GroupKind,
    KindMismatchError,
    Pose,
)
from enf.latents import LatentSet, act_on_latent_set
import enf.numerics as nm

ROTO = BiInvariantKind.ROTO_TRANSLATION
TRANS = BiInvariantKind.TRANSLATION
SE2 = GroupKind.ROTO_TRANSLATION_2D


def random_set(kind=ROTO, n=5, d=6, seed=0):
    rng = np.random.default_rng(seed)
    poses = np.concatenate(
        [rng.uniform(-0.8, 0.8, (n, 2)), rng.uniform(0, 2 * math.pi, (n, 1))], axis=1
    )[:, : kind.pose_dim]
    return LatentSet.from_arrays(kind, poses, rng.normal(0, 1, (n, d)))


def config(kind=ROTO, d=6, classes=3, **kw):
    defaults = dict(d_latent=d, n_classes=classes, kind=kind, n_layers=2, d_node_hidden=16)
    defaults.update(kw)
    return MpnnConfig(**defaults)


class TestRelativePoseInvariant:
    def test_identity_relative_pose(self):
        p = Pose(SE2, (0.4, -0.1), 1.2)
        out = relative_pose_invariant(p, p, ROTO)
        assert np.allclose(out, (0.0, 0.0, 1.0, 0.0), atol=1e-15)

    def test_pure_translation_pair(self):
        p_i = Pose(SE2, (1.0, 0.0), 0.0)
        p_j = Pose(SE2, (0.0, 0.0), 0.0)
        assert np.allclose(relative_pose_invariant(p_i, p_j, ROTO), (1.0, 0.0, 1.0, 0.0))

    def test_translation_kind_subtracts(self):
        p_i = Pose(GroupKind.TRANSLATION_2D, (0.5, 0.25))
        p_j = Pose(GroupKind.TRANSLATION_2D, (0.25, 0.5))
        assert np.allclose(relative_pose_invariant(p_i, p_j, TRANS), (0.25, -0.25))

    def test_invariance_under_global_action(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(300):
            g = GroupElement(SE2, tuple(rng.uniform(-1, 1, 2)), rng.uniform(0, 2 * math.pi))
            p_i = Pose(SE2, tuple(rng.uniform(-1, 1, 2)), rng.uniform(0, 2 * math.pi))
            p_j = Pose(SE2, tuple(rng.uniform(-1, 1, 2)), rng.uniform(0, 2 * math.pi))
            from enf.geometry import act_on_pose

            before = relative_pose_invariant(p_i, p_j, ROTO)
            after = relative_pose_invariant(act_on_pose(g, p_i), act_on_pose(g, p_j), ROTO)
            worst = max(worst, float(np.abs(before - after).max()))
        assert worst < 1e-10

    def test_kind_mismatch_rejected(self):
        with pytest.raises(KindMismatchError):
            relative_pose_invariant(
                Pose(SE2, (0, 0), 0), Pose(GroupKind.TRANSLATION_2D, (0, 0)), ROTO
            )


class TestMpnnForward:
    def test_single_latent_depends_only_on_context(self):
        cfg = config()
        params = init_mpnn(cfg, np.random.default_rng(0))
        ctx = np.random.default_rng(1).normal(0, 1, (1, 6))
        z1 = LatentSet.from_arrays(ROTO, np.array([[0.1, 0.2, 0.3]]), ctx)
        z2 = LatentSet.from_arrays(ROTO, np.array([[-0.7, 0.5, 2.1]]), ctx)
        assert np.allclose(mpnn_logits(z1, params, cfg), mpnn_logits(z2, params, cfg), atol=1e-12)

    def test_permutation_invariance(self):
        cfg = config()
        params = init_mpnn(cfg, np.random.default_rng(0))
        z = random_set(seed=2)
        perm = np.random.default_rng(3).permutation(z.n)
        z_perm = LatentSet(tuple(z.points[i] for i in perm), z.d_latent, z.kind)
        assert np.allclose(
            mpnn_logits(z, params, cfg), mpnn_logits(z_perm, params, cfg), atol=1e-9
        )

    @pytest.mark.parametrize("kind", [TRANS, ROTO])
    def test_logits_invariant_under_global_action(self, kind):
        cfg = config(kind=kind)
        params = init_mpnn(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(4)
        for trial in range(10):
            z = random_set(kind=kind, seed=trial + 10)
            if kind is ROTO:
                g = GroupElement(SE2, tuple(rng.uniform(-1, 1, 2)), rng.uniform(0, 2 * math.pi))
            else:
                g = GroupElement(GroupKind.TRANSLATION_2D, tuple(rng.uniform(-1, 1, 2)))
            moved = act_on_latent_set(g, z)
            assert (
                np.abs(mpnn_logits(z, params, cfg) - mpnn_logits(moved, params, cfg)).max()
                < 1e-6
            )

    def test_none_kind_not_invariant(self):
        cfg = config(kind=BiInvariantKind.NONE)
        params = init_mpnn(cfg, np.random.default_rng(0))
        z = random_set(kind=BiInvariantKind.NONE, seed=5)
        g = GroupElement(SE2, (0.5, -0.3), 1.0)
        moved = act_on_latent_set(g, z)
        assert np.abs(mpnn_logits(z, params, cfg) - mpnn_logits(moved, params, cfg)).max() > 1e-3

    def test_kind_mismatch_rejected(self):
        cfg = config(kind=TRANS)
        params = init_mpnn(cfg, np.random.default_rng(0))
        with pytest.raises(KindMismatchError):
            mpnn_forward(random_set(kind=ROTO), params, cfg)


class TestTraining:
    def test_single_class_reaches_full_accuracy(self):
        cfg = config(classes=1)
        sets = [random_set(seed=s) for s in range(6)]
        model, report = train_classifier(
            sets, [0] * 6, cfg, np.random.default_rng(0), epochs=2, batch_size=3
        )
        assert report["train_acc"] == 1.0

    def test_shuffled_labels_stay_near_chance_on_test(self):
        rng = np.random.default_rng(6)
        train_sets = [random_set(seed=s) for s in range(30)]
        train_labels = list(rng.integers(0, 3, 30))
        test_sets = [random_set(seed=100 + s) for s in range(30)]
        test_labels = list(rng.integers(0, 3, 30))
        cfg = config()
        _, report = train_classifier(
            train_sets, train_labels, cfg, np.random.default_rng(1),
            test_sets=test_sets, test_labels=test_labels, epochs=10, batch_size=8,
        )
        assert abs(report["test_acc"] - 1 / 3) <= 0.25

    def test_count_mismatch_rejected(self):
        cfg = config()
        with pytest.raises(ValueError, match="mismatch"):
            train_classifier([random_set()], [0, 1], cfg, np.random.default_rng(0))

    def test_baseline_ignores_poses_entirely(self):
        cfg = config()
        params = init_baseline(cfg, np.random.default_rng(0))
        ctx = np.random.default_rng(1).normal(0, 1, (4, 6))
        za = LatentSet.from_arrays(ROTO, np.random.default_rng(2).uniform(-1, 1, (4, 3)), ctx)
        zb = LatentSet.from_arrays(ROTO, np.random.default_rng(3).uniform(-1, 1, (4, 3)), ctx)
        assert np.array_equal(
            baseline_forward(za, params, cfg).data, baseline_forward(zb, params, cfg).data
        )

    def test_cross_entropy_matches_log_softmax(self):
        logits = nm.tensor([[1.0, 2.0, 0.5]], "f64")
        raw = np.array([1.0, 2.0, 0.5])
        expected = -(raw[1] - np.log(np.exp(raw).sum()))
        assert cross_entropy(logits, 1).item() == pytest.approx(expected)


class TestPersistence:
    def test_classifier_roundtrip(self, tmp_path):
        cfg = config()
        params = init_mpnn(cfg, np.random.default_rng(0))
        path = tmp_path / "clf.enfc"
        save_classifier(path, params, cfg)
        loaded, cfg2 = load_classifier(path)
        assert cfg2 == cfg
        z = random_set(seed=8)
        assert np.array_equal(mpnn_logits(z, params, cfg), mpnn_logits(z, loaded, cfg2))

    def test_predictions_csv(self, tmp_path):
        path = tmp_path / "pred.csv"
        write_predictions_csv(
            path, [("s0", 1, 2, np.array([0.1, 0.2, 0.7])), ("s1", 0, 0, np.array([0.9, 0.05, 0.05]))]
        )
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "sample_id,label,pred,logit0,logit1,logit2"
        assert lines[1].startswith("s0,1,2,")
