"""Layer vocabulary for the score network.

Image tensors are channel-major ``(C, N, H, W)`` so a convolution is a single
matrix product against im2col columns with no layout shuffles.
"""
from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor, as_tensor, bmm, make, reshape, scale, softmax, transpose


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Columns of shape ``(C*k*k, N*H*W)`` for a zero-padded 'same' convolution."""
    c, n, h, w = x.shape
    p = k // 2
    xp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + h, p:p + w] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return np.ascontiguousarray(win.transpose(0, 4, 5, 1, 2, 3)).reshape(c * k * k, n * h * w)


def _col2im(cols: np.ndarray, shape, k: int) -> np.ndarray:
    c, n, h, w = shape
    p = k // 2
    cols = cols.reshape(c, k, k, n, h, w)
    xp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + h, j:j + w] += cols[:, i, j]
    return xp[:, :, p:p + h, p:p + w]


def conv2d(x, w, b=None) -> Tensor:
    """Stride-1 convolution with zero 'same' padding.

    ``x`` is ``(C, N, H, W)``, ``w`` is ``(O, C, k, k)`` with odd ``k``; the
    result is ``(O, N, H, W)``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    c, n, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c or k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d: kernel {w.shape} incompatible with input {x.shape}")
    wmat = w.data.reshape(o, -1)
    if k == 1:
        cols = x.data.reshape(c, -1)
    else:
        cols = _im2col(x.data, k)
    out = wmat @ cols
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise DimensionError(f"conv2d bias must have shape ({o},), got {b.shape}")
        out += b.data[:, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gm = g.reshape(o, -1)
        gx = None
        if x.requires_grad:
            gcols = wmat.T @ gm
            gx = gcols.reshape(x.shape) if k == 1 else _col2im(gcols, x.shape, k)
        gw = (gm @ cols.T).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=1)

    return make(out.reshape(o, n, h, wd), parents, backward)


def dense(x, w, b=None) -> Tensor:
    """Affine map ``x @ w + b`` for ``x`` of shape ``(N, D)`` and ``w`` of shape ``(D, O)``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense: incompatible shapes {x.shape} and {w.shape}")
    out = x.data @ w.data
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"dense bias shape {b.shape} does not match {w.shape}")
        out = out + b.data
    xd, wd = x.data, w.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        grads = (g @ wd.T, xd.T @ g)
        return grads if b is None else grads + (g.sum(axis=0),)

    return make(out, parents, backward)


def add_channel(x, e) -> Tensor:
    """Add a per-sample channel vector ``e`` of shape ``(N, C)`` (or ``(C,)``) to every pixel."""
    x, e = as_tensor(x), as_tensor(e)
    c, n = x.shape[:2]
    if e.shape not in ((n, c), (c,)):
        raise DimensionError(f"add_channel: {e.shape} cannot be added to {x.shape}")
    per_sample = e.data.ndim == 2
    ev = e.data.T[:, :, None, None] if per_sample else e.data[:, None, None, None]

    def backward(g):
        ge = g.sum(axis=(2, 3)).T if per_sample else g.sum(axis=(1, 2, 3))
        return g, ge

    return make(x.data + ev, (x, e), backward)


def silu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    return make(xd * sig, (x,), lambda g: (g * sig * (1 + xd * (1 - sig)),))


def group_norm(x, groups: int, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize each sample over (channels-in-group, H, W), then apply a per-channel affine."""
    x = as_tensor(x)
    c, n, h, w = x.shape
    if c % groups:
        raise DimensionError(f"{c} channels cannot be split into {groups} groups")
    xg = x.data.reshape(groups, c // groups, n, h * w)
    m = (c // groups) * h * w
    mu = xg.mean(axis=(1, 3), keepdims=True, dtype=np.float64).astype(x.dtype)
    centered = xg - mu
    var = np.square(centered).mean(axis=(1, 3), keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (centered * inv).reshape(c, n, h, w)
    out = xhat
    parents = [x]
    if gamma is not None:
        gamma, beta = as_tensor(gamma), as_tensor(beta)
        if gamma.shape != (c,) or beta.shape != (c,):
            raise DimensionError(f"group_norm affine params must have shape ({c},)")
        out = xhat * gamma.data[:, None, None, None] + beta.data[:, None, None, None]
        parents += [gamma, beta]

    def backward(g):
        gh = g if gamma is None else g * gamma.data[:, None, None, None]
        gh = gh.reshape(xg.shape)
        xh = xhat.reshape(xg.shape)
        gmean = gh.sum(axis=(1, 3), keepdims=True, dtype=np.float64) / m
        gxmean = (gh * xh).sum(axis=(1, 3), keepdims=True, dtype=np.float64) / m
        gx = inv * (gh - gmean.astype(x.dtype) - xh * gxmean.astype(x.dtype))
        grads = [gx.reshape(c, n, h, w)]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=(1, 2, 3)))
            grads.append(g.sum(axis=(1, 2, 3)))
        return grads

    return make(out, parents, backward)


def avg_pool2(x) -> Tensor:
    x = as_tensor(x)
    c, n, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(c, n, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * x.dtype.type(0.25),)

    return make(out, (x,), backward)


def upsample2(x) -> Tensor:
    x = as_tensor(x)
    c, n, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(c, n, h, 2, w, 2).sum(axis=(3, 5)),)

    return make(out, (x,), backward)


def concat(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from exc
    return make(out, xs, lambda g: np.split(g, splits, axis=axis))


def mix_rows(rows, fallback, mask) -> Tensor:
    """Row ``i`` of the result is ``fallback`` where ``mask[i]`` else ``rows[i]``.

    Used to swap a learned null embedding into unconditional samples.
    """
    rows, fallback = as_tensor(rows), as_tensor(fallback)
    mask = np.asarray(mask, dtype=bool)
    n, d = rows.shape
    if fallback.shape != (d,) or mask.shape != (n,):
        raise DimensionError("mix_rows: mask/fallback shapes do not match rows")
    out = np.where(mask[:, None], fallback.data[None, :], rows.data)

    def backward(g):
        return np.where(mask[:, None], 0, g).astype(g.dtype), g[mask].sum(axis=0)

    return make(out, (rows, fallback), backward)


def self_attention(x, wq, wk, wv, wo) -> Tensor:
    """Single-head attention over the ``H*W`` positions of each sample; projections are ``(C, C)``."""
    x = as_tensor(x)
    c, n, h, w = x.shape
    seq = reshape(transpose(reshape(x, (c, n, h * w)), (1, 2, 0)), (n * h * w, c))

    def proj(m):
        return reshape(dense(seq, m), (n, h * w, c))

    q, k, v = proj(wq), proj(wk), proj(wv)
    scores = scale(bmm(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(c))
    att = bmm(softmax(scores, axis=-1), v)
    out = dense(reshape(att, (n * h * w, c)), wo)
    return reshape(transpose(reshape(out, (n, h * w, c)), (2, 0, 1)), (c, n, h, w))
