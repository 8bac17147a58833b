"""Similarity, affinity, reference selection, aggregation, and the memory bank."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import backend
from .sampling import ReferenceMap, SampledMatrix
from .tensor_io import FeatureMap, ObjectLabelMap


def _kernels():
    if backend.active() == "numba":
        from . import kernels_numba as impl
    else:
        from . import kernels_numpy as impl
    return impl


@dataclass(frozen=True)
class MatchConfig:
    """Knobs of the matching stage.

    window: odd side length k of the sampling neighborhood (default 15).
    reference_mode: "aligned" uses p(i) = i; "guided" picks reference points
        by coarse similarity search.
    top_t: number of reference points kept per query in guided mode.
    keyframe_interval: every r-th frame enters the memory.
    coarse_patch: patch side for the pooled coarse search in guided mode.
    """

    window: int = 15
    reference_mode: str = "guided"
    top_t: int = 1
    keyframe_interval: int = 6
    coarse_patch: int = 4

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be odd")
        if self.reference_mode not in ("aligned", "guided"):
            raise ValueError(f"reference_mode must be 'aligned' or 'guided', got {self.reference_mode!r}")
        if self.top_t < 1:
            raise ValueError("top_t must be >= 1")
        if self.keyframe_interval < 1:
            raise ValueError("keyframe_interval must be >= 1")
        if self.coarse_patch < 1:
            raise ValueError("coarse_patch must be >= 1")


@dataclass(frozen=True)
class AffinityMatrix:
    """Per-query softmax weights over the sampled memory candidates.

    ``weights`` is stored with one row per query element, i.e. the transpose
    of the memory-major layout: weights[i, j] is the mass query i puts on
    candidate j.  Rows sum to 1; padded candidates carry exactly 0.
    """

    weights: np.ndarray
    grid: tuple[int, int]

    @property
    def query_count(self) -> int:
        return self.weights.shape[0]

    @property
    def candidate_count(self) -> int:
        return self.weights.shape[1]

    def validate(self, tol: float = 1e-6) -> None:
        sums = self.weights.sum(axis=1)
        if not np.all(np.abs(sums - 1.0) <= tol):
            raise AssertionError("affinity rows do not sum to 1")
        if self.weights.min() < 0.0 or self.weights.max() > 1.0:
            raise AssertionError("affinity weights outside [0, 1]")


def similarity(key: np.ndarray, query: np.ndarray) -> float:
    """Negative squared Euclidean distance; larger means more similar."""
    k = np.asarray(key, dtype=np.float64).ravel()
    q = np.asarray(query, dtype=np.float64).ravel()
    if k.shape != q.shape:
        raise ValueError(f"dimension mismatch: key has {k.size} channels, query {q.size}")
    diff = k - q
    return float(-np.dot(diff, diff))


def masked_softmax(scores: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Stable per-row softmax restricted to valid entries (invalid get exactly 0)."""
    from . import kernels_numpy

    return kernels_numpy.masked_softmax(np.asarray(scores, dtype=np.float64), np.asarray(valid, dtype=bool))


def _flatten_query(query) -> np.ndarray:
    if isinstance(query, FeatureMap):
        return query.flattened()
    arr = np.asarray(query, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr.reshape(-1, arr.shape[2])
    if arr.ndim != 2:
        raise ValueError(f"query must be a FeatureMap or (HW, D) array, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def affinity(sampled_keys, query, pad_mask: np.ndarray | None = None) -> AffinityMatrix:
    """Softmax of similarities between each query element and its sampled keys.

    ``sampled_keys`` is a SampledMatrix or a raw (HW, N, D) float32 array (N
    may span several memory entries).  Padded entries (pad_mask False) are
    excluded from the softmax and come out exactly 0.  A query with no valid
    candidate is an error.
    """
    if isinstance(sampled_keys, SampledMatrix):
        keys = sampled_keys.data
        if pad_mask is None:
            pad_mask = sampled_keys.valid
        grid = sampled_keys.grid
    else:
        keys = np.ascontiguousarray(np.asarray(sampled_keys, dtype=np.float32))
        grid = (keys.shape[0], 1)
    if keys.ndim != 3:
        raise ValueError(f"sampled keys must have shape (HW, N, D), got {keys.shape}")
    q = _flatten_query(query)
    if isinstance(query, FeatureMap):
        grid = (query.height, query.width)
    if q.shape[0] != keys.shape[0]:
        raise ValueError(
            f"query count mismatch: {q.shape[0]} query elements vs {keys.shape[0]} sampled rows"
        )
    if q.shape[1] != keys.shape[2]:
        raise ValueError(f"channel mismatch: keys have {keys.shape[2]}, query has {q.shape[1]}")
    if pad_mask is None:
        valid = np.ones(keys.shape[:2], dtype=bool)
    else:
        valid = np.ascontiguousarray(np.asarray(pad_mask, dtype=bool))
        if valid.shape != keys.shape[:2]:
            raise ValueError(f"pad mask shape {valid.shape} does not match candidates {keys.shape[:2]}")
    rows_ok = valid.any(axis=1)
    if not rows_ok.all():
        bad = int(np.flatnonzero(~rows_ok)[0])
        raise ValueError(f"query {bad} has zero valid candidates")
    weights = _kernels().affinity_weights(keys, q, valid)
    return AffinityMatrix(weights=weights, grid=grid)


def select_references(query: FeatureMap, memory_key: FeatureMap, config: MatchConfig) -> ReferenceMap:
    """Similarity-guided reference points via a coarse patch-pooled search.

    The memory key map is mean-pooled over coarse_patch x coarse_patch cells,
    every query element is scored against every patch vector, and the top-t
    patch centers (ties to the smaller flattened patch index) become the
    reference points.
    """
    if (memory_key.height, memory_key.width) != (query.height, query.width):
        raise ValueError("memory key dims must match query dims")
    if memory_key.channels != query.channels:
        raise ValueError("memory key channels must match query channels")
    h, w, d = query.height, query.width, query.channels
    cp = config.coarse_patch
    if cp > h or cp > w:
        raise ValueError(f"coarse-patch {cp} larger than map {h}x{w}")
    if h % cp or w % cp:
        raise ValueError(f"coarse-patch {cp} must divide the map dims {h}x{w}")

    ph, pw = h // cp, w // cp
    pooled = (
        memory_key.data.astype(np.float64).reshape(ph, cp, pw, cp, d).mean(axis=(1, 3)).reshape(ph * pw, d)
    )
    q = query.flattened().astype(np.float64)
    # -||q - m||^2 = 2 q.m - ||m||^2 - ||q||^2; the query norm is constant per
    # row and cannot change the per-row ranking, so it is dropped.
    scores = 2.0 * (q @ pooled.T) - np.einsum("pd,pd->p", pooled, pooled)[None, :]

    t = config.top_t
    if t > ph * pw:
        raise ValueError(f"top_t {t} exceeds the {ph * pw} coarse patches")
    if t == 1:
        picks = np.argmax(scores, axis=1)[:, None]
    else:
        picks = np.argsort(-scores, axis=1, kind="stable")[:, :t]
    centers_r = (picks // pw) * cp + cp // 2
    centers_c = (picks % pw) * cp + cp // 2
    positions = np.stack([centers_r, centers_c], axis=2)
    return ReferenceMap(positions, grid=(h, w), aligned=False)


def aggregate(values, aff: AffinityMatrix, grid: tuple[int, int] | None = None) -> FeatureMap:
    """Readout: F[i, :] = sum_j aff[i, j] * values[i, j, :].

    ``values`` is a SampledMatrix (grid taken from it) or a raw (HW, N, D)
    array with ``grid`` given explicitly.
    """
    if isinstance(values, SampledMatrix):
        data = values.data
        grid = values.grid if grid is None else grid
    else:
        data = np.ascontiguousarray(np.asarray(values, dtype=np.float32))
    if grid is None:
        raise ValueError("grid required when aggregating a raw array")
    if data.ndim != 3:
        raise ValueError(f"values must have shape (HW, N, D), got {data.shape}")
    if aff.weights.shape != data.shape[:2]:
        raise ValueError(
            f"affinity shape {aff.weights.shape} does not match values {data.shape[:2]}"
        )
    h, w = grid
    if h * w != data.shape[0]:
        raise ValueError("grid does not match the query count")
    out = _kernels().aggregate(data, aff.weights)
    return FeatureMap(out.reshape(h, w, data.shape[2]).astype(np.float32))


def keyframe_schedule(t: int, r: int) -> bool:
    """True when 1-based frame t is stored as a keyframe: every r-th frame,
    counted from frame 1 (which always is one)."""
    if t < 1:
        raise ValueError("frame index is 1-based")
    if r < 1:
        raise ValueError("keyframe interval must be >= 1")
    return (t - 1) % r == 0


@dataclass(frozen=True)
class MemoryEntry:
    frame_index: int
    key: FeatureMap
    value: FeatureMap
    labels: ObjectLabelMap


@dataclass(frozen=True)
class MemoryBank:
    """Ordered keyframe store; insertion returns a new bank (entries are shared)."""

    entries: tuple[MemoryEntry, ...] = field(default_factory=tuple)
    capacity: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if self.capacity is not None and self.capacity < 1:
            raise ValueError("capacity must be >= 1")

    def __len__(self) -> int:
        return len(self.entries)


def bank_insert(
    bank: MemoryBank,
    frame: int,
    key: FeatureMap,
    value: FeatureMap,
    labels: ObjectLabelMap,
) -> MemoryBank:
    """Append a keyframe entry; evicts the oldest non-first entry past capacity.

    The first stored frame is the reference and is never evicted.
    """
    if bank.entries:
        last = bank.entries[-1]
        if frame <= last.frame_index:
            raise ValueError(
                f"out-of-order insertion: frame {frame} after frame {last.frame_index}"
            )
        head = bank.entries[0]
        if (key.height, key.width) != (head.key.height, head.key.width):
            raise ValueError("entry geometry differs from the bank")
        if key.channels != head.key.channels or value.channels != head.value.channels:
            raise ValueError("entry channel counts differ from the bank")
    if (labels.height, labels.width) != (key.height, key.width):
        raise ValueError("labels must be at the key feature resolution")
    if (value.height, value.width) != (key.height, key.width):
        raise ValueError("value geometry must match the key")
    entries = bank.entries + (MemoryEntry(frame, key, value, labels),)
    if bank.capacity is not None:
        while len(entries) > bank.capacity and len(entries) > 1:
            entries = entries[:1] + entries[2:]
    return MemoryBank(entries=entries, capacity=bank.capacity)
