"""Numba twins of the numpy kernels.  Import only when numba is available.

The sampling kernels write into caller-zeroed outputs and are bit-exact
equals of the numpy versions (pure data movement).  The affinity kernel
accumulates in float64 like the numpy path; tiny last-bit differences from
summation order are expected and tolerated by the tests.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def gather(x, pr, pc, offs, out):
    hw = pr.shape[0]
    k2 = offs.shape[0]
    h, w, d = x.shape
    for i in range(hw):
        for j in range(k2):
            r = pr[i] + offs[j, 0]
            c = pc[i] + offs[j, 1]
            if 0 <= r < h and 0 <= c < w:
                for ch in range(d):
                    out[i, j, ch] = x[r, c, ch]


@njit(cache=True)
def shift_aligned(x, offs, out3):
    h, w, d = x.shape
    k2 = offs.shape[0]
    for j in range(k2):
        dy = offs[j, 0]
        dx = offs[j, 1]
        r0 = max(0, -dy)
        r1 = min(h, h - dy)
        c0 = max(0, -dx)
        c1 = min(w, w - dx)
        for r in range(r0, r1):
            for c in range(c0, c1):
                for ch in range(d):
                    out3[r, c, j, ch] = x[r + dy, c + dx, ch]


@njit(cache=True)
def shift_refs(x, pr, pc, offs, out):
    hw = pr.shape[0]
    k2 = offs.shape[0]
    h, w, d = x.shape
    for j in range(k2):
        dy = offs[j, 0]
        dx = offs[j, 1]
        for i in range(hw):
            r = pr[i] + dy
            c = pc[i] + dx
            if 0 <= r < h and 0 <= c < w:
                for ch in range(d):
                    out[i, j, ch] = x[r, c, ch]


@njit(cache=True)
def _affinity_weights(keys, query, valid, out):
    hw, n, d = keys.shape
    for i in range(hw):
        best = -np.inf
        for j in range(n):
            if valid[i, j]:
                s = 0.0
                for ch in range(d):
                    diff = np.float64(keys[i, j, ch]) - np.float64(query[i, ch])
                    s += diff * diff
                out[i, j] = -s
                if -s > best:
                    best = -s
        total = 0.0
        for j in range(n):
            if valid[i, j]:
                wgt = np.exp(out[i, j] - best)
                out[i, j] = wgt
                total += wgt
            else:
                out[i, j] = 0.0
        for j in range(n):
            out[i, j] /= total


def affinity_weights(keys: np.ndarray, query: np.ndarray, valid: np.ndarray) -> np.ndarray:
    out = np.empty(valid.shape, dtype=np.float64)
    _affinity_weights(keys, query, valid, out)
    return out


@njit(cache=True)
def _aggregate(values, weights, out):
    hw, n, d = values.shape
    for i in range(hw):
        for j in range(n):
            wgt = weights[i, j]
            for ch in range(d):
                out[i, ch] += wgt * np.float64(values[i, j, ch])


def aggregate(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    out = np.zeros((values.shape[0], values.shape[2]), dtype=np.float64)
    _aggregate(values, weights, out)
    return out
