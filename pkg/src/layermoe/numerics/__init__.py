"""Deterministic 64-bit numerics: array helpers, autodiff, seeded randomness.

Matrices and vectors are plain float64 numpy arrays (row-major); gradients
come from the tape in :mod:`layermoe.numerics.autodiff` and are bound by the
finite-difference contract, not by the tape internals.
"""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateVectorError, InvalidInputError
from .autodiff import (
    Tensor,
    as_tensor,
    central_difference,
    embedding,
    log_softmax,
    scatter_rows,
    silu,
    stack_columns,
    take_along,
    take_pairs,
    take_rows,
    value_and_grad,
    zero_grads,
)
from .autodiff import softmax as softmax_t
from .rng import ALGORITHM, SeededRng, derive_seed

__all__ = [
    "ALGORITHM",
    "SeededRng",
    "Tensor",
    "as_tensor",
    "central_difference",
    "cosine",
    "derive_seed",
    "embedding",
    "log_softmax",
    "scatter_rows",
    "silu",
    "softmax",
    "softmax_t",
    "stack_columns",
    "take_along",
    "take_pairs",
    "take_rows",
    "value_and_grad",
    "zero_grads",
]


def softmax(values) -> np.ndarray:
    """Probability vector of ``values`` along the last axis, max-subtracted.

    Raises InvalidInputError on non-finite input.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise InvalidInputError("softmax of an empty vector")
    if not np.isfinite(arr).all():
        raise InvalidInputError("softmax input must be finite")
    shifted = arr - arr.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cosine(u, v) -> float:
    """Cosine similarity of two nonzero vectors, clamped to [-1, 1]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise InvalidInputError(f"cosine needs equal-length vectors, got {u.shape} and {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine of a zero-norm vector is undefined")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))
