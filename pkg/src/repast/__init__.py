"""Desk-scale novel-view synthesis with relative pose attention.

The package encodes posed RGB views into a set-latent scene representation
and decodes per-ray colors with a light-field decoder. Three model variants
are provided: a global-reference-frame baseline (``srt``), a fully
pairwise-relative variant (``repast``) that is invariant to the choice of
world frame and to input-view order, and an ablation (``repast-b``) with
relative pose in the encoder only.
"""

import os

# Cap BLAS worker pools before numpy is imported anywhere in the package.
# REPA_THREADS=1 pins reductions to a single thread for strict determinism.
_threads = os.environ.get("REPA_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
del os, _threads

from . import geometry, metrics, model, scenes, tensor, training  # noqa: E402
from .tensor import Tape, Tensor  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "geometry",
    "metrics",
    "model",
    "scenes",
    "tensor",
    "training",
]
