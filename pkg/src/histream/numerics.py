"""Dense tensor operations every other module builds on.

Tensors are plain numpy ndarrays, float32 in the production path (row-major,
innermost axis last). Every op is a pure function of its inputs; with BLAS
pinned to a fixed thread count (see cli.HISTREAM_THREADS) repeated calls are
bit-identical. Gradient-check oracles may pass float64 arrays; ops preserve
the input dtype.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .rng import Rng


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D matrix product with explicit shape validation."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, max-subtracted for stability."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def downsample_avg2(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling over the trailing two axes.

    Each output cell is the arithmetic mean of its 2x2 source block, so the
    global mean is preserved.
    """
    if x.ndim < 2:
        raise ShapeError(f"downsample_avg2 needs at least 2 axes, got shape {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise ShapeError(f"spatial extents must be even, got {h}x{w}")
    lead = x.shape[:-2]
    blocks = x.reshape(*lead, h // 2, 2, w // 2, 2)
    return blocks.mean(axis=(-3, -1))


def _upsample_axis2(x: np.ndarray, axis: int) -> np.ndarray:
    """Double one axis by bilinear interpolation (align_corners=False)."""
    n = x.shape[axis]
    # output o samples source coordinate o/2 - 0.25; edge samples clamp
    src = np.arange(2 * n, dtype=np.float64) / 2.0 - 0.25
    i0 = np.floor(src).astype(np.int64)
    w1 = (src - i0).astype(x.dtype)
    i0c = np.clip(i0, 0, n - 1)
    i1c = np.clip(i0 + 1, 0, n - 1)
    x0 = np.take(x, i0c, axis=axis)
    x1 = np.take(x, i1c, axis=axis)
    shape = [1] * x.ndim
    shape[axis] = 2 * n
    w1 = w1.reshape(shape)
    # lerp form keeps constants exact and output within [min, max]
    return x0 + w1 * (x1 - x0)


def upsample_bilinear2(x: np.ndarray) -> np.ndarray:
    """2x bilinear upsampling (align_corners=False) over the trailing two axes."""
    if x.ndim < 2:
        raise ShapeError(f"upsample_bilinear2 needs at least 2 axes, got shape {x.shape}")
    out = _upsample_axis2(x, x.ndim - 2)
    return _upsample_axis2(out, x.ndim - 1)


def gaussian(rng: Rng, dims, dtype=np.float32) -> np.ndarray:
    """Standard-normal tensor, deterministic given (seed, substream, dims)."""
    return rng.standard_normal(tuple(dims), dtype=dtype)
