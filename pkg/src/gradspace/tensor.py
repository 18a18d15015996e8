"""Array helpers and the seeded random number source.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. The helpers
here add the explicit shape checks the rest of the package relies on;
nothing in the package broadcasts silently across parameter shapes.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from gradspace.errors import ShapeError

DTYPE = np.float64


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Copy ``data`` into a float64 array, optionally reshaping row-major."""
    arr = np.array(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"shape must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    return arr


def check_shape(arr: np.ndarray, shape: tuple[int, ...], name: str = "tensor") -> None:
    if arr.shape != tuple(shape):
        raise ShapeError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two 2-D arrays with an explicit inner-dimension check."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def make_rng(seed: int) -> np.random.Generator:
    """PCG-64 generator; identical seeds give identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def child_seed(parent_seed: int, stream_index: int) -> int:
    """Derive an independent 64-bit seed for sub-stream ``stream_index``."""
    ss = np.random.SeedSequence([int(parent_seed), int(stream_index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def sample_gaussian(rng: np.random.Generator, shape) -> np.ndarray:
    """I.i.d. standard-normal samples drawn from ``rng``."""
    return rng.standard_normal(shape, dtype=DTYPE)


def sigmoid(x):
    """Logistic function, evaluated without overflow for large ``|x|``."""
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    """log(1 + exp(x)) without overflow."""
    x = np.asarray(x)
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def logit(p, bound: float = 1e-6):
    p = np.clip(np.asarray(p), bound, 1.0 - bound)
    return np.log(p) - np.log1p(-p)
