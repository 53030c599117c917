"""Square grid resampling on a fixed canvas.

Fields are plain 2-D numpy arrays. A field at scaling factor ``alpha`` is
represented on the full ``S x S`` canvas by block-averaging the truth down to
``size x size`` and replicating each cell back up (see :func:`pixelate`).
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError, DimensionError


def as_field(values) -> np.ndarray:
    f = np.asarray(values)
    if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
        raise DimensionError(f"expected a non-empty 2-D field, got shape {f.shape}")
    return f


def block_coarsen(f, out_h: int, out_w: int) -> np.ndarray:
    """Average non-overlapping blocks so the result is ``out_h x out_w``."""
    f = as_field(f)
    h, w = f.shape
    if out_h < 1 or out_w < 1 or h % out_h or w % out_w:
        raise DimensionError(f"cannot coarsen {h}x{w} to {out_h}x{out_w}")
    bh, bw = h // out_h, w // out_w
    blocks = f.reshape(out_h, bh, out_w, bw)
    out_dtype = np.result_type(f.dtype, np.float32)
    # extended accumulator for f64 input keeps constant blocks exact
    acc = np.longdouble if out_dtype == np.float64 else np.float64
    out = blocks.mean(axis=(1, 3), dtype=acc)
    return out.astype(out_dtype)


def bilinear_resize(f, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation.

    Output sample ``i`` sits at input coordinate ``i * (h - 1) / (out_h - 1)``
    so that the first and last rows/columns coincide with the input's.
    """
    f = as_field(f)
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"invalid output size {out_h}x{out_w}")
    src = f.astype(np.float64)
    ys, y0, y1, wy = _axis_weights(f.shape[0], out_h)
    xs, x0, x1, wx = _axis_weights(f.shape[1], out_w)
    del ys, xs
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    out = top * (1 - wy)[:, None] + bot * wy[:, None]
    return out.astype(np.result_type(f.dtype, np.float32), copy=False)


def _axis_weights(n_in: int, n_out: int):
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return pos, lo, hi, pos - lo


def nearest_expand(f, canvas: int) -> np.ndarray:
    """Replicate each cell of a square field into a ``canvas/size`` block."""
    f = as_field(f)
    h, w = f.shape
    if h != w:
        raise DimensionError(f"nearest_expand needs a square field, got {h}x{w}")
    if canvas < h or canvas % h:
        raise DimensionError(f"canvas {canvas} is not a multiple of {h}")
    k = canvas // h
    return np.repeat(np.repeat(f, k, axis=0), k, axis=1)


def pixelate(truth, size: int) -> np.ndarray:
    f = as_field(truth)
    s = f.shape[0]
    if f.shape[1] != s:
        raise DimensionError(f"pixelate needs a square canvas, got {f.shape}")
    if size < 1 or s % size:
        raise DimensionError(f"canvas {s} is not divisible by {size}")
    if size == s:
        return f.copy()
    return nearest_expand(block_coarsen(f, size, size), s)


@dataclass(frozen=True)
class FactorSet:
    base: int
    canvas: int
    factors: tuple[Fraction, ...]
    sizes: tuple[int, ...]

    def size_for(self, alpha) -> int:
        """Output resolution ``alpha * base``; must land on an integer divisor of the canvas."""
        size = Fraction(alpha).limit_denominator(10_000) * self.base
        if size.denominator != 1 or self.canvas % int(size):
            raise ConfigError(f"alpha={alpha} does not give a canvas divisor for L={self.base}")
        return int(size)


def enumerate_factors(base: int, canvas: int) -> FactorSet:
    """Scaling factors ``canvas / (base * i)`` for ``i = 1..4``."""
    if base < 1 or canvas < 1:
        raise ConfigError("base and canvas sizes must be positive")
    if canvas % 12:
        raise ConfigError(f"canvas size S={canvas} must be divisible by 12")
    if canvas // 4 < base:
        raise ConfigError(f"S/4 >= L violated: S={canvas}, L={base}")
    factors = tuple(Fraction(canvas, base * i) for i in range(1, 5))
    sizes = tuple(canvas // i for i in range(1, 5))
    return FactorSet(base, canvas, factors, sizes)
