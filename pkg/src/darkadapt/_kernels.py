"""Hot per-pixel kernels.

Each kernel has a numba ``@njit`` loop version and a vectorised numpy version.
The loop versions are used when numba imports and ``DARKADAPT_DISABLE_NUMBA``
is unset (or ``0``); otherwise the numpy path is selected at import time.
Both versions are always importable so they can be compared directly.
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("DARKADAPT_DISABLE_NUMBA", "0") in ("", "0")


def _njit(func):
    if not NUMBA_AVAILABLE:
        return func
    return numba.njit(cache=True, nogil=True)(func)


# ---------------------------------------------------------------------------
# weighted channel sums


def _weighted_sum_numpy(frames, wr, wg, wb, stride):
    # frames: (T, H, W, 3); returns (T,) float64 per-frame sums
    sub = frames[:, ::stride, ::stride, :]
    sums = np.empty(sub.shape[0], dtype=np.float64)
    for t in range(sub.shape[0]):
        f = sub[t]
        sums[t] = (
            wr * f[..., 0].sum(dtype=np.float64)
            + wg * f[..., 1].sum(dtype=np.float64)
            + wb * f[..., 2].sum(dtype=np.float64)
        )
    return sums


@_njit
def _weighted_sum_loop(frames, wr, wg, wb, stride):
    n_t = frames.shape[0]
    sums = np.zeros(n_t, dtype=np.float64)
    for t in range(n_t):
        acc = 0.0
        for i in range(0, frames.shape[1], stride):
            for j in range(0, frames.shape[2], stride):
                acc += (
                    wr * np.float64(frames[t, i, j, 0])
                    + wg * np.float64(frames[t, i, j, 1])
                    + wb * np.float64(frames[t, i, j, 2])
                )
        sums[t] = acc
    return sums


# ---------------------------------------------------------------------------
# half-open binning: bin i holds edges[i] <= v < edges[i+1]; len(edges)-1 is overflow


def _bin_index_numpy(values, edges):
    values = np.asarray(values, dtype=np.float64)
    n_bins = edges.shape[0] - 1
    idx = np.searchsorted(edges, values, side="right") - 1
    out = (idx < 0) | (idx >= n_bins) | ~np.isfinite(values)
    idx[out] = n_bins
    return idx.astype(np.int64)


@_njit
def _bin_index_loop(values, edges):
    n_bins = edges.shape[0] - 1
    out = np.empty(values.shape[0], dtype=np.int64)
    for k in range(values.shape[0]):
        v = values[k]
        out[k] = n_bins
        if not (v >= edges[0] and v < edges[n_bins]):
            continue
        lo = 0
        hi = n_bins
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if v >= edges[mid]:
                lo = mid
            else:
                hi = mid
        out[k] = lo
    return out


def weighted_channel_sums(frames, weights, stride=1):
    """Per-frame sum over pixels of ``wr*R + wg*G + wb*B`` in float64."""
    wr, wg, wb = (float(w) for w in weights)
    frames = np.ascontiguousarray(frames)
    if USE_NUMBA:
        return _weighted_sum_loop(frames, wr, wg, wb, int(stride))
    return _weighted_sum_numpy(frames, wr, wg, wb, int(stride))


def bin_index(values, edges):
    values = np.ascontiguousarray(values, dtype=np.float64)
    edges = np.ascontiguousarray(edges, dtype=np.float64)
    if USE_NUMBA:
        return _bin_index_loop(values, edges)
    return _bin_index_numpy(values, edges)


def backend():
    return "numba" if USE_NUMBA else "numpy"
