"""Planar group elements, their actions, and bi-invariant attributes.

Supported kinds: the trivial group, translations of the plane (and of
3-space, for point-cloud style latents), and planar roto-translations.
A pose is a group element anchoring a latent in the signal domain; for
the trivial kind the pose degenerates to a free position that no group
element moves.

The attribute family ``bi_invariant`` pairs a coordinate with a pose so
that transforming both by the same group element leaves the attribute
unchanged.  The roto-translation attribute applies the *inverse* pose
rotation, a(x, p) = R(-theta) (x - t): this is the form under which the
steerability of the decoded field actually holds (the same-rotation
variant fails the invariance property test).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


class KindMismatchError(Exception):
    """Group elements / poses of incompatible kinds were combined."""


class GroupKind(str, Enum):
    TRIVIAL = "trivial"
    TRANSLATION_2D = "translation2d"
    ROTO_TRANSLATION_2D = "rototranslation2d"
    TRANSLATION_3D = "translation3d"

    @property
    def t_dim(self) -> int:
        return 3 if self is GroupKind.TRANSLATION_3D else 2

    @property
    def has_rotation(self) -> bool:
        return self is GroupKind.ROTO_TRANSLATION_2D


def _canonical_angle(theta: float) -> float:
    theta = math.fmod(theta, TWO_PI)
    if theta < 0.0:
        theta += TWO_PI
    return 0.0 if theta == TWO_PI else theta


@dataclass(frozen=True)
class GroupElement:
    """An element of the configured group; also used as a latent pose.

    ``theta`` is stored canonically in [0, 2pi) and is meaningful only
    for the roto-translation kind.
    """

    kind: GroupKind
    t: tuple
    theta: float = 0.0

    def __post_init__(self):
        t = tuple(float(v) for v in self.t)
        if len(t) != self.kind.t_dim:
            raise KindMismatchError(
                f"{self.kind.value} needs a {self.kind.t_dim}-vector translation, got {len(t)}"
            )
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "theta", _canonical_angle(float(self.theta)))

    @classmethod
    def identity(cls, kind: GroupKind) -> "GroupElement":
        return cls(kind, (0.0,) * kind.t_dim, 0.0)

    @property
    def position(self) -> np.ndarray:
        """Translation part (the pose position accessor)."""
        return np.array(self.t, dtype=np.float64)

    def is_identity(self, tol: float = 0.0) -> bool:
        return all(abs(v) <= tol for v in self.t) and (
            min(self.theta, TWO_PI - self.theta) <= tol if self.theta else True
        )


Pose = GroupElement


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]], dtype=np.float64)


def group_product(g: GroupElement, h: GroupElement) -> GroupElement:
    """Composition g.h; for roto-translations (t, R)(t', R') = (t + R t', R R')."""
    if g.kind is not h.kind:
        raise KindMismatchError(f"cannot compose {g.kind.value} with {h.kind.value}")
    if g.kind is GroupKind.TRIVIAL:
        return GroupElement.identity(GroupKind.TRIVIAL)
    if g.kind is GroupKind.ROTO_TRANSLATION_2D:
        t = np.asarray(g.t) + rotation_matrix(g.theta) @ np.asarray(h.t)
        return GroupElement(g.kind, tuple(t), g.theta + h.theta)
    return GroupElement(g.kind, tuple(np.asarray(g.t) + np.asarray(h.t)))


def group_inverse(g: GroupElement) -> GroupElement:
    """The element with g_inv . g = identity: (-R(theta)^T t, -theta)."""
    if g.kind is GroupKind.TRIVIAL:
        return GroupElement.identity(GroupKind.TRIVIAL)
    if g.kind is GroupKind.ROTO_TRANSLATION_2D:
        t = -(rotation_matrix(g.theta).T @ np.asarray(g.t))
        return GroupElement(g.kind, tuple(t), -g.theta)
    return GroupElement(g.kind, tuple(-v for v in g.t))


def act_on_point(g: GroupElement, x: Sequence[float]) -> np.ndarray:
    """g x = R x + t (trivial elements leave coordinates untouched)."""
    x = np.asarray(x, dtype=np.float64)
    if g.kind is GroupKind.TRIVIAL:
        return x.copy()
    if x.shape[-1] != g.kind.t_dim:
        raise KindMismatchError(f"{g.kind.value} acts on {g.kind.t_dim}-vectors, got {x.shape}")
    if g.kind is GroupKind.ROTO_TRANSLATION_2D:
        return x @ rotation_matrix(g.theta).T + np.asarray(g.t)
    return x + np.asarray(g.t)


def act_on_pose(g: GroupElement, p: Pose) -> Pose:
    """Left action on a pose: the group product when kinds match.

    A translation or roto-translation may also act on a trivial-kind
    pose, moving its free position; that is how geometry-free latent
    sets are transported for the negative steerability checks.
    """
    if g.kind is GroupKind.TRIVIAL:
        return p
    if p.kind is GroupKind.TRIVIAL:
        if g.kind.t_dim != 2:
            raise KindMismatchError(f"{g.kind.value} cannot act on planar trivial poses")
        return Pose(GroupKind.TRIVIAL, tuple(act_on_point(g, p.position)))
    if g.kind is not p.kind:
        raise KindMismatchError(f"{g.kind.value} element cannot act on {p.kind.value} pose")
    return group_product(g, p)


class BiInvariantKind(str, Enum):
    """Which attribute family conditions the field (and hence its symmetry)."""

    NONE = "none"
    TRANSLATION = "translation"
    ROTO_TRANSLATION = "rototranslation"

    @property
    def a_dim(self) -> int:
        return 4 if self is BiInvariantKind.NONE else 2

    @property
    def pose_kind(self) -> GroupKind:
        if self is BiInvariantKind.NONE:
            return GroupKind.TRIVIAL
        if self is BiInvariantKind.TRANSLATION:
            return GroupKind.TRANSLATION_2D
        return GroupKind.ROTO_TRANSLATION_2D

    @property
    def pose_dim(self) -> int:
        """Length of the serialized pose vector: (tx, ty) or (tx, ty, theta)."""
        return 3 if self is BiInvariantKind.ROTO_TRANSLATION else 2


def bi_invariant(kind: BiInvariantKind, x: Sequence[float], p: Pose) -> np.ndarray:
    """Attribute a(x, p), invariant under joint transformation of x and p.

    Translation: x - t.  Roto-translation: R(-theta) (x - t).  The
    ``NONE`` family concatenates the raw pose position with x and is
    deliberately not invariant (it ablates equivariance away).
    """
    x = np.asarray(x, dtype=np.float64)
    if kind is BiInvariantKind.NONE:
        return np.concatenate([p.position, x])
    if kind is BiInvariantKind.TRANSLATION:
        return x - p.position
    return rotation_matrix(-p.theta) @ (x - p.position)
