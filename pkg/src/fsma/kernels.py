"""Hot numeric kernels: blockwise softmax, weighted integration, top-block
counting.

Each kernel exists twice: a numba ``@njit`` build (``*_nb``) and a pure-numpy
fallback (``*_np``). The active flavor is chosen once at import time: setting
the environment variable ``FSMA_NO_NUMBA`` (to any non-empty value) or a
failing numba import selects the numpy path. ``BACKEND`` reports which one is
live; ``benchmarks/bench_kernels.py`` times both.

Matrix products (the projector MLPs) are deliberately *not* here — numpy
delegates those to BLAS, which a jitted loop will not beat. The kernels below
are the loop-shaped per-channel/per-block reductions where fusion pays.

All kernels take float64 C-contiguous arrays. Batched shapes are
``(batch, n_blocks, channels)``; the softmax/argmax axis is always the block
axis (axis 1).
"""

import os

import numpy as np

__all__ = [
    "BACKEND",
    "scale_weights",
    "scale_weights_backward",
    "integrate",
    "integrate_backward",
    "count_top_blocks",
    "warmup",
]


# ---------------------------------------------------------------------------
# pure-numpy fallbacks
# ---------------------------------------------------------------------------

def scale_weights_np(raw):
    """Columnwise softmax over the block axis of ``raw`` (batch, n, d).

    Max-subtraction per channel guards against overflow; every channel column
    of the result is a probability distribution over blocks.
    """
    shifted = raw - raw.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def scale_weights_backward_np(scaled, grad_scaled):
    """VJP of :func:`scale_weights_np`: grad wrt the raw weights."""
    inner = (scaled * grad_scaled).sum(axis=1, keepdims=True)
    return scaled * (grad_scaled - inner)


def integrate_np(projected, scaled):
    """Channel-wise weighted sum over blocks: (batch, n, d) -> (batch, d)."""
    return (scaled * projected).sum(axis=1)


def integrate_backward_np(projected, scaled, grad_out):
    """VJP of :func:`integrate_np` wrt (projected, scaled)."""
    g = grad_out[:, None, :]
    return g * scaled, g * projected


def count_top_blocks_np(weights):
    """Top-block frequency counts under the strict-half rule (numpy path).

    For every image and channel the argmax block is counted; the
    second-largest block is counted too iff its weight is strictly greater
    than half the largest. Ties resolve to the lowest block index (argmax on
    a masked copy keeps that property).
    """
    m, n, d = weights.shape
    counts = np.zeros(n, dtype=np.int64)
    top1 = weights.argmax(axis=1)
    np.add.at(counts, top1.ravel(), 1)
    if n < 2:
        return counts
    v1 = np.take_along_axis(weights, top1[:, None, :], axis=1)[:, 0, :]
    masked = weights.copy()
    np.put_along_axis(masked, top1[:, None, :], -np.inf, axis=1)
    top2 = masked.argmax(axis=1)
    v2 = np.take_along_axis(masked, top2[:, None, :], axis=1)[:, 0, :]
    hit = v2 > 0.5 * v1
    np.add.at(counts, top2[hit], 1)
    return counts


# ---------------------------------------------------------------------------
# numba builds
# ---------------------------------------------------------------------------

_DISABLED = bool(os.environ.get("FSMA_NO_NUMBA"))

if not _DISABLED:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a hard dep, but be safe
        _DISABLED = True

if not _DISABLED:

    @njit(cache=True)
    def scale_weights_nb(raw):
        b, n, d = raw.shape
        out = np.empty((b, n, d))
        for s in range(b):
            for c in range(d):
                hi = raw[s, 0, c]
                for i in range(1, n):
                    if raw[s, i, c] > hi:
                        hi = raw[s, i, c]
                tot = 0.0
                for i in range(n):
                    e = np.exp(raw[s, i, c] - hi)
                    out[s, i, c] = e
                    tot += e
                inv = 1.0 / tot
                for i in range(n):
                    out[s, i, c] *= inv
        return out

    @njit(cache=True)
    def scale_weights_backward_nb(scaled, grad_scaled):
        b, n, d = scaled.shape
        out = np.empty((b, n, d))
        for s in range(b):
            for c in range(d):
                inner = 0.0
                for i in range(n):
                    inner += scaled[s, i, c] * grad_scaled[s, i, c]
                for i in range(n):
                    out[s, i, c] = scaled[s, i, c] * (grad_scaled[s, i, c] - inner)
        return out

    @njit(cache=True)
    def integrate_nb(projected, scaled):
        b, n, d = projected.shape
        out = np.zeros((b, d))
        for s in range(b):
            for i in range(n):
                for c in range(d):
                    out[s, c] += scaled[s, i, c] * projected[s, i, c]
        return out

    @njit(cache=True)
    def integrate_backward_nb(projected, scaled, grad_out):
        b, n, d = projected.shape
        d_proj = np.empty((b, n, d))
        d_scaled = np.empty((b, n, d))
        for s in range(b):
            for i in range(n):
                for c in range(d):
                    d_proj[s, i, c] = grad_out[s, c] * scaled[s, i, c]
                    d_scaled[s, i, c] = grad_out[s, c] * projected[s, i, c]
        return d_proj, d_scaled

    @njit(cache=True)
    def count_top_blocks_nb(weights):
        m, n, d = weights.shape
        counts = np.zeros(n, dtype=np.int64)
        for s in range(m):
            for c in range(d):
                best = 0
                for i in range(1, n):
                    if weights[s, i, c] > weights[s, best, c]:
                        best = i
                counts[best] += 1
                if n > 1:
                    second = -1
                    for i in range(n):
                        if i == best:
                            continue
                        if second < 0 or weights[s, i, c] > weights[s, second, c]:
                            second = i
                    if weights[s, second, c] > 0.5 * weights[s, best, c]:
                        counts[second] += 1
        return counts

    BACKEND = "numba"
    scale_weights = scale_weights_nb
    scale_weights_backward = scale_weights_backward_nb
    integrate = integrate_nb
    integrate_backward = integrate_backward_nb
    count_top_blocks = count_top_blocks_nb
else:
    BACKEND = "numpy"
    scale_weights_nb = None
    scale_weights_backward_nb = None
    integrate_nb = None
    integrate_backward_nb = None
    count_top_blocks_nb = None
    scale_weights = scale_weights_np
    scale_weights_backward = scale_weights_backward_np
    integrate = integrate_np
    integrate_backward = integrate_backward_np
    count_top_blocks = count_top_blocks_np


def warmup():
    """Trigger JIT compilation of every active kernel on tiny inputs.

    One-time per-process cost; call before timing anything.
    """
    raw = np.zeros((1, 2, 2))
    s = scale_weights(raw)
    scale_weights_backward(s, raw)
    integrate(raw, s)
    integrate_backward(raw, s, np.zeros((1, 2)))
    count_top_blocks(s)
