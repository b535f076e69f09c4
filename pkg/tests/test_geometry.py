import math

import numpy as np
import pytest

from enf.geometry import (
    BiInvariantKind,
    GroupElement,
    GroupKind,
    KindMismatchError,
    Pose,
    act_on_point,
    act_on_pose,
    bi_invariant,
    group_inverse,
    group_product,
    rotation_matrix,
)

SE2 = GroupKind.ROTO_TRANSLATION_2D
T2 = GroupKind.TRANSLATION_2D


def random_element(kind: GroupKind, rng) -> GroupElement:
    t = tuple(rng.uniform(-1, 1, size=kind.t_dim))
    theta = rng.uniform(0, 2 * math.pi) if kind.has_rotation else 0.0
    return GroupElement(kind, t, theta)


class TestGroupProduct:
    def test_pure_translations_commute(self):
        g = GroupElement(SE2, (1.0, 0.0), 0.0)
        h = GroupElement(SE2, (0.0, 1.0), 0.0)
        out = group_product(g, h)
        assert out.t == (1.0, 1.0) and out.theta == 0.0

    def test_rotation_then_translation_by_hand(self):
        # t + R t' with R = rot(pi/2) = [[0, -1], [1, 0]]: (1, 0) -> (0, 1).
        g = GroupElement(SE2, (0.0, 0.0), math.pi / 2)
        h = GroupElement(SE2, (1.0, 0.0), 0.0)
        out = group_product(g, h)
        assert np.allclose(out.t, (0.0, 1.0), atol=1e-15)
        assert out.theta == pytest.approx(math.pi / 2)

    def test_identity_axiom(self):
        g = GroupElement(SE2, (0.3, -0.7), 1.1)
        out = group_product(g, GroupElement.identity(SE2))
        assert np.allclose(out.t, g.t) and out.theta == pytest.approx(g.theta)

    def test_mixed_kinds_rejected(self):
        with pytest.raises(KindMismatchError):
            group_product(GroupElement(T2, (1.0, 0.0)), GroupElement(SE2, (0.0, 0.0), 0.0))


class TestGroupInverse:
    def test_translation_inverse(self):
        g = GroupElement(T2, (1.0, 1.0))
        assert group_inverse(g).t == (-1.0, -1.0)

    def test_inverse_composes_to_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            g = random_element(SE2, rng)
            out = group_product(group_inverse(g), g)
            assert np.abs(out.position).max() < 1e-12
            assert min(out.theta, 2 * math.pi - out.theta) < 1e-12

    def test_quarter_turn_inverse_by_composition(self):
        g = GroupElement(SE2, (1.0, 0.0), math.pi / 2)
        inv = group_inverse(g)
        assert np.allclose(inv.t, (0.0, 1.0), atol=1e-15)  # -R(-pi/2) (1,0)
        out = group_product(g, inv)
        assert np.abs(out.position).max() < 1e-15


class TestActions:
    def test_translate_point(self):
        g = GroupElement(T2, (1.0, 1.0))
        assert np.allclose(act_on_point(g, (0.0, 0.0)), (1.0, 1.0))

    def test_rotate_point_by_hand_matrix(self):
        g = GroupElement(SE2, (0.0, 0.0), math.pi / 2)
        assert np.allclose(act_on_point(g, (1.0, 0.0)), (0.0, 1.0), atol=1e-15)

    def test_identity_action(self):
        g = GroupElement.identity(SE2)
        x = np.array([0.3, -0.4])
        assert np.allclose(act_on_point(g, x), x)

    def test_batched_points(self):
        g = GroupElement(T2, (1.0, -1.0))
        pts = np.array([[0.0, 0.0], [1.0, 1.0]])
        assert np.allclose(act_on_point(g, pts), [[1.0, -1.0], [2.0, 0.0]])

    def test_pose_identity(self):
        p = Pose(SE2, (0.1, 0.2), 0.5)
        assert act_on_pose(GroupElement.identity(SE2), p) == p

    def test_pose_translation_shifts_position_only(self):
        g = GroupElement(SE2, (1.0, 0.0), 0.0)
        p = Pose(SE2, (0.0, 0.0), math.pi / 4)
        out = act_on_pose(g, p)
        assert np.allclose(out.t, (1.0, 0.0))
        assert out.theta == pytest.approx(math.pi / 4)

    def test_pose_rotation_matches_group_product_oracle(self):
        g = GroupElement(SE2, (0.0, 0.0), math.pi / 2)
        p = Pose(SE2, (1.0, 0.0), 0.0)
        out = act_on_pose(g, p)
        oracle = group_product(g, p)
        assert np.allclose(out.t, oracle.t) and out.theta == oracle.theta
        assert np.allclose(out.t, (0.0, 1.0), atol=1e-15)

    def test_trivial_pose_moved_by_position_action(self):
        g = GroupElement(SE2, (0.5, 0.0), math.pi / 2)
        p = Pose(GroupKind.TRIVIAL, (1.0, 0.0))
        out = act_on_pose(g, p)
        assert out.kind is GroupKind.TRIVIAL
        assert np.allclose(out.position, (0.5, 1.0), atol=1e-15)


class TestGroupAxioms:
    def test_axioms_over_random_triples(self):
        rng = np.random.default_rng(1)
        for kind in (T2, SE2, GroupKind.TRANSLATION_3D):
            for _ in range(1000):
                g, h, k = (random_element(kind, rng) for _ in range(3))
                left = group_product(group_product(g, h), k)
                right = group_product(g, group_product(h, k))
                assert np.abs(left.position - right.position).max() < 1e-12
                if kind.has_rotation:
                    d = abs(left.theta - right.theta)
                    assert min(d, 2 * math.pi - d) < 1e-12
                ident = group_product(g, group_inverse(g))
                assert np.abs(ident.position).max() < 1e-12


class TestBiInvariant:
    def test_translation_subtraction(self):
        p = Pose(T2, (1.0, 1.0))
        assert np.allclose(bi_invariant(BiInvariantKind.TRANSLATION, (3.0, 4.0), p), (2.0, 3.0))

    def test_rototranslation_by_hand_matrix(self):
        # R(-pi/2) = [[0, 1], [-1, 0]] applied to (1, 0) gives (0, -1).
        p = Pose(SE2, (0.0, 0.0), math.pi / 2)
        out = bi_invariant(BiInvariantKind.ROTO_TRANSLATION, (1.0, 0.0), p)
        assert np.allclose(out, (0.0, -1.0), atol=1e-15)

    def test_none_concatenation(self):
        p = Pose(GroupKind.TRIVIAL, (1.0, 2.0))
        out = bi_invariant(BiInvariantKind.NONE, (3.0, 4.0), p)
        assert np.allclose(out, (1.0, 2.0, 3.0, 4.0))

    def test_output_dimensions(self):
        assert BiInvariantKind.NONE.a_dim == 4
        assert BiInvariantKind.TRANSLATION.a_dim == 2
        assert BiInvariantKind.ROTO_TRANSLATION.a_dim == 2

    def test_invariance_under_joint_transformation(self):
        rng = np.random.default_rng(2)
        cases = [
            (BiInvariantKind.TRANSLATION, T2),
            (BiInvariantKind.ROTO_TRANSLATION, SE2),
        ]
        for kind, gk in cases:
            worst = 0.0
            for _ in range(1000):
                g = random_element(gk, rng)
                x = rng.uniform(-1, 1, size=2)
                p = random_element(kind.pose_kind, rng)
                before = bi_invariant(kind, x, p)
                after = bi_invariant(kind, act_on_point(g, x), act_on_pose(g, p))
                worst = max(worst, float(np.abs(before - after).max()))
            assert worst < 1e-10, f"{kind.value}: {worst}"

    def test_none_kind_is_not_invariant(self):
        rng = np.random.default_rng(3)
        g = GroupElement(SE2, (0.4, -0.2), 1.0)
        x = rng.uniform(-1, 1, size=2)
        p = Pose(GroupKind.TRIVIAL, tuple(rng.uniform(-1, 1, size=2)))
        before = bi_invariant(BiInvariantKind.NONE, x, p)
        after = bi_invariant(BiInvariantKind.NONE, act_on_point(g, x), act_on_pose(g, p))
        assert np.abs(before - after).max() > 1e-3


class TestCanonicalAngles:
    def test_theta_wraps_into_range(self):
        assert GroupElement(SE2, (0, 0), 2 * math.pi + 0.5).theta == pytest.approx(0.5)
        assert GroupElement(SE2, (0, 0), -0.5).theta == pytest.approx(2 * math.pi - 0.5)
        assert GroupElement(SE2, (0, 0), 2 * math.pi).theta == 0.0

    def test_rotation_matrix_orthonormal(self):
        r = rotation_matrix(0.7)
        assert np.allclose(r @ r.T, np.eye(2), atol=1e-15)
