"""Frame-by-frame propagation: match, aggregate, read out masks, grow memory."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .contrastive import downsample_labels
from .matching import (
    AffinityMatrix,
    MatchConfig,
    MemoryBank,
    affinity,
    aggregate,
    bank_insert,
    keyframe_schedule,
    select_references,
)
from .sampling import ReferenceMap, aligned_references, make_direction_set, sample_shift
from .tensor_io import FeatureMap, ObjectLabelMap, VideoSequence


@dataclass
class StageTiming:
    """Accumulated wall-clock seconds per matching stage (reference selection
    and candidate gathering count as sampling)."""

    sampling: float = 0.0
    affinity: float = 0.0
    aggregation: float = 0.0

    @property
    def total(self) -> float:
        return self.sampling + self.affinity + self.aggregation


@dataclass(frozen=True)
class SegmentationResult:
    """Per-frame predicted labels, per-frame soft scores, and stage timings.

    ``scores[t]`` has shape (num_objects + 1, H, W); row 0 is background.
    Per pixel the rows sum to 1 and the emitted label is their argmax (ties
    to the smaller id).  ``candidate_slots[t]`` counts the sampled candidate
    slots per query element at frame t (0 for the given first frame).
    """

    labels: tuple[ObjectLabelMap, ...]
    scores: tuple[np.ndarray, ...]
    timing: StageTiming
    candidate_slots: tuple[int, ...]


def readout_mask(aff: AffinityMatrix, sampled_labels: np.ndarray, objects: int) -> np.ndarray:
    """Affinity-weighted label propagation.

    Score of object o at query i is the affinity mass on candidates labeled o;
    the background row completes the simplex.  Returns (objects + 1, HW).
    """
    weights = aff.weights
    labels = np.asarray(sampled_labels)
    if labels.shape != weights.shape:
        raise ValueError(f"label shape {labels.shape} does not match affinity {weights.shape}")
    scores = np.zeros((objects + 1, weights.shape[0]), dtype=np.float64)
    for obj in range(1, objects + 1):
        scores[obj] = (weights * (labels == obj)).sum(axis=1)
    scores[0] = np.clip(1.0 - scores[1:].sum(axis=0), 0.0, 1.0)
    return scores


def _one_hot_scores(mask: ObjectLabelMap, objects: int) -> np.ndarray:
    scores = np.zeros((objects + 1, mask.height, mask.width), dtype=np.float64)
    for obj in range(objects + 1):
        scores[obj][mask.labels == obj] = 1.0
    return scores


def _dedup_candidates(flat_positions: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Invalidate repeated candidate positions per query, keeping the first slot.

    ``flat_positions`` is (HW, N) with a unique negative sentinel per invalid
    slot so only genuine repeats collide.
    """
    order = np.argsort(flat_positions, axis=1, kind="stable")
    ranked = np.take_along_axis(flat_positions, order, axis=1)
    dup_ranked = np.zeros_like(valid)
    dup_ranked[:, 1:] = ranked[:, 1:] == ranked[:, :-1]
    dup = np.zeros_like(valid)
    np.put_along_axis(dup, order, dup_ranked, axis=1)
    return valid & ~dup


def _entry_candidates(
    query: FeatureMap,
    entry,
    config: MatchConfig,
    dirs,
    timing: StageTiming,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Sample keys, values, and labels of one memory entry around its references."""
    started = time.perf_counter()
    if config.reference_mode == "guided":
        refs = select_references(query, entry.key, config)
    else:
        refs = aligned_references(query.height, query.width)
    label_map = entry.labels.labels.astype(np.float32)[:, :, None]

    keys_parts, values_parts, labels_parts, valid_parts, pos_parts = [], [], [], [], []
    h_m, w_m = entry.key.height, entry.key.width
    for layer_idx in range(refs.top_t):
        layer = refs.layer(layer_idx)
        keys = sample_shift(entry.key, layer, dirs)
        values = sample_shift(entry.value, layer, dirs)
        labels = sample_shift(label_map, layer, dirs)
        keys_parts.append(keys.data)
        values_parts.append(values.data)
        labels_parts.append(labels.data[:, :, 0])
        valid_parts.append(keys.valid)
        rows = layer.positions[:, 0, 0][:, None] + dirs.offsets[None, :, 0]
        cols = layer.positions[:, 0, 1][:, None] + dirs.offsets[None, :, 1]
        pos_parts.append(rows * w_m + cols)

    keys = np.concatenate(keys_parts, axis=1)
    values = np.concatenate(values_parts, axis=1)
    labels = np.rint(np.concatenate(labels_parts, axis=1)).astype(np.int32)
    valid = np.concatenate(valid_parts, axis=1)
    if refs.top_t > 1:
        flat = np.concatenate(pos_parts, axis=1)
        sentinel = -1 - np.arange(flat.shape[1], dtype=np.int64)[None, :]
        flat = np.where(valid, flat, sentinel)
        valid = _dedup_candidates(flat, valid)
    timing.sampling += time.perf_counter() - started
    return keys, values, labels, valid


def segment_video(video: VideoSequence, config: MatchConfig) -> SegmentationResult:
    """Propagate the first-frame mask through the whole video.

    Frame 1 echoes its reference mask.  Every later frame samples candidates
    from all memory entries, softmaxes their similarities, reads out object
    scores by label propagation, and joins the memory when the keyframe
    schedule says so (with its own predicted labels).  Deterministic end to
    end for fixed inputs.
    """
    frames = video.frames
    if not frames:
        raise ValueError("empty video")
    first = frames[0]
    mask0 = video.first_frame_mask
    if video.feature_scale > 1:
        mask0 = downsample_labels(mask0, first.height, first.width)
    if (mask0.height, mask0.width) != (first.height, first.width):
        raise ValueError("first-frame mask does not match the frame geometry")
    n_objects = mask0.num_objects

    dirs = make_direction_set(config.window)
    timing = StageTiming()
    labels_out: list[ObjectLabelMap] = [mask0]
    scores_out: list[np.ndarray] = [_one_hot_scores(mask0, n_objects)]
    slots: list[int] = [0]

    bank = bank_insert(MemoryBank(), 1, first, first, mask0)
    for t in range(2, len(frames) + 1):
        query = frames[t - 1]
        keys_all, values_all, labels_all, valid_all = [], [], [], []
        for entry in bank.entries:
            keys, values, labels, valid = _entry_candidates(query, entry, config, dirs, timing)
            keys_all.append(keys)
            values_all.append(values)
            labels_all.append(labels)
            valid_all.append(valid)
        keys = np.concatenate(keys_all, axis=1)
        values = np.concatenate(values_all, axis=1)
        cand_labels = np.concatenate(labels_all, axis=1)
        valid = np.concatenate(valid_all, axis=1)
        slots.append(keys.shape[1])

        started = time.perf_counter()
        aff = affinity(keys, query, pad_mask=valid)
        timing.affinity += time.perf_counter() - started

        started = time.perf_counter()
        aggregate(values, aff, grid=(query.height, query.width))
        timing.aggregation += time.perf_counter() - started

        scores = readout_mask(aff, cand_labels, n_objects)
        predicted = scores.argmax(axis=0).astype(np.int32).reshape(query.height, query.width)
        pred_mask = ObjectLabelMap(predicted, num_objects=n_objects)
        labels_out.append(pred_mask)
        scores_out.append(scores.reshape(n_objects + 1, query.height, query.width))

        if keyframe_schedule(t, config.keyframe_interval):
            bank = bank_insert(bank, t, query, query, pred_mask)

    return SegmentationResult(
        labels=tuple(labels_out),
        scores=tuple(scores_out),
        timing=timing,
        candidate_slots=tuple(slots),
    )
