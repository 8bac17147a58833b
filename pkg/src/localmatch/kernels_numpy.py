"""Pure-numpy kernels: the fallback path when numba is disabled or missing.

Every function here has a numba twin in :mod:`localmatch.kernels_numba` with
identical semantics; the sampling kernels are bit-exact across backends
because they only move float32 values.
"""

from __future__ import annotations

import numpy as np


def gather(x: np.ndarray, pr: np.ndarray, pc: np.ndarray, offs: np.ndarray, out: np.ndarray) -> None:
    """Per-reference-point im2col: each query slices its own window.

    ``offs`` is guaranteed to be the full centered square in raster order, so
    the window of query i is the contiguous k x k block of a zero-padded copy
    of the map, sliced independently per reference point.
    """
    h, w, d = x.shape
    k2 = offs.shape[0]
    k = int(round(k2**0.5))
    half = (k - 1) // 2
    padded = np.zeros((h + k - 1, w + k - 1, d), dtype=x.dtype)
    padded[half : half + h, half : half + w] = x
    for i in range(pr.shape[0]):
        r, c = pr[i], pc[i]
        out[i] = padded[r : r + k, c : c + k].reshape(k2, d)


def shift_aligned(x: np.ndarray, offs: np.ndarray, out: np.ndarray) -> None:
    """Direction-major sampling for spatially aligned references.

    For each offset the whole map is shifted once and written into row block
    j of the output; no per-position slicing happens.
    """
    h, w, d = x.shape
    out3 = out.reshape(h, w, offs.shape[0], d)
    for j in range(offs.shape[0]):
        dy, dx = int(offs[j, 0]), int(offs[j, 1])
        r0, r1 = max(0, -dy), min(h, h - dy)
        c0, c1 = max(0, -dx), min(w, w - dx)
        if r0 < r1 and c0 < c1:
            out3[r0:r1, c0:c1, j] = x[r0 + dy : r1 + dy, c0 + dx : c1 + dx]


def shift_refs(x: np.ndarray, pr: np.ndarray, pc: np.ndarray, offs: np.ndarray, out: np.ndarray) -> None:
    """Direction-major sampling for arbitrary reference points.

    The shifted map evaluated at the reference points is the map evaluated at
    the offset positions, so each direction becomes one vectorized gather
    into row block j.
    """
    h, w, _ = x.shape
    for j in range(offs.shape[0]):
        rows = pr + offs[j, 0]
        cols = pc + offs[j, 1]
        ok = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        out[ok, j] = x[rows[ok], cols[ok]]


def masked_softmax(scores: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Row-wise max-subtracted softmax over the valid candidates only.

    Invalid entries get weight exactly 0.  Every row must contain at least
    one valid entry (callers check).
    """
    s = np.where(valid, scores, -np.inf)
    s = s - s.max(axis=1, keepdims=True)
    weights = np.exp(s)
    weights[~valid] = 0.0
    weights /= weights.sum(axis=1, keepdims=True)
    return weights


def affinity_weights(keys: np.ndarray, query: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Softmax over negative squared L2 distances, per query row.

    keys (HW, N, D) float32, query (HW, D) float32, valid (HW, N) bool.
    Returns (HW, N) float64 weights.  Scores accumulate in float64; the
    chunking only bounds the size of the difference temporary.
    """
    hw, n, d = keys.shape
    scores = np.empty((hw, n), dtype=np.float64)
    chunk = max(1, (1 << 22) // max(1, n * d))
    for s in range(0, hw, chunk):
        e = min(hw, s + chunk)
        diff = keys[s:e].astype(np.float64) - query[s:e, None, :].astype(np.float64)
        scores[s:e] = -np.einsum("qnd,qnd->qn", diff, diff)
    return masked_softmax(scores, valid)


def aggregate(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Convex combination of candidate values: (HW, N, D) x (HW, N) -> (HW, D) float64."""
    return np.einsum("qn,qnd->qd", weights, values.astype(np.float64))
