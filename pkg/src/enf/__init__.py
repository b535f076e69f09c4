"""Equivariant neural fields over latent point clouds.

A field f(x; z) is decoded from a latent set z = {(pose_i, context_i)}
through bi-invariant cross-attention, making the decoding steerable:
transforming the latent set transforms the field.  The package bundles
the tensor kernel, group machinery, latent editing, two fitting loops,
a synthetic corpus, an invariant classifier, a CLI, and an HTTP editor
backend.
"""

import os as _os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from . import numerics
from .geometry import BiInvariantKind, GroupElement, GroupKind, Pose, bi_invariant
from .latents import LatentSet, act_on_latent_set, load_latents, save_latents, stitch
from .numerics import GradientTape, Tensor, backward, finite_difference_check

__version__ = "0.1.0"

__all__ = [
    "numerics",
    "Tensor",
    "GradientTape",
    "backward",
    "finite_difference_check",
    "BiInvariantKind",
    "GroupElement",
    "GroupKind",
    "Pose",
    "bi_invariant",
    "LatentSet",
    "act_on_latent_set",
    "stitch",
    "save_latents",
    "load_latents",
    "__version__",
]
