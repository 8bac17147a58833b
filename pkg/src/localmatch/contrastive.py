"""Object-aware spatio-temporal contrastive learning pieces.

Projection of feature maps into an embedding space, majority-downsampling of
label rasters, balanced anchor-set sampling, and the InfoNCE-style loss with
its analytic gradient.  Anchors come from the query frame, positives from the
keyframes, and the negatives of an object are the sampled anchors of every
other object (background counts as an ordinary object and supplies the
hardest negatives).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensor_io import FeatureMap, ObjectLabelMap

DEFAULT_TEMPERATURE = 0.1
DEFAULT_PROJECTION_DIM = 128


@dataclass(frozen=True)
class ProjectionHead:
    """Two pointwise affine stages with a ReLU between, optional L2 output norm."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    normalize: bool = True

    def __post_init__(self):
        w1 = np.asarray(self.w1, dtype=np.float64)
        b1 = np.asarray(self.b1, dtype=np.float64)
        w2 = np.asarray(self.w2, dtype=np.float64)
        b2 = np.asarray(self.b2, dtype=np.float64)
        if w1.ndim != 2 or w2.ndim != 2 or w1.shape[1] != w2.shape[0]:
            raise ValueError("stage shapes are inconsistent")
        if b1.shape != (w1.shape[1],) or b2.shape != (w2.shape[1],):
            raise ValueError("bias shapes are inconsistent")
        for name, arr in (("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)):
            object.__setattr__(self, name, arr)

    @property
    def input_channels(self) -> int:
        return self.w1.shape[0]

    @property
    def output_channels(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def identity(cls, channels: int, normalize: bool = False) -> "ProjectionHead":
        """Exact identity for any input: relu(x) - relu(-x) reconstructs x."""
        eye = np.eye(channels)
        w1 = np.concatenate([eye, -eye], axis=1)
        w2 = np.concatenate([eye, -eye], axis=0)
        return cls(w1=w1, b1=np.zeros(2 * channels), w2=w2, b2=np.zeros(channels), normalize=normalize)

    @classmethod
    def random(
        cls,
        channels: int,
        output_channels: int = DEFAULT_PROJECTION_DIM,
        hidden: int | None = None,
        seed: int = 0,
        normalize: bool = True,
    ) -> "ProjectionHead":
        hidden = channels if hidden is None else hidden
        rng = np.random.default_rng(seed)
        w1 = rng.standard_normal((channels, hidden)) / np.sqrt(channels)
        w2 = rng.standard_normal((hidden, output_channels)) / np.sqrt(hidden)
        return cls(w1=w1, b1=np.zeros(hidden), w2=w2, b2=np.zeros(output_channels), normalize=normalize)

    def apply(self, vectors: np.ndarray) -> np.ndarray:
        """Project (N, D) float vectors to (N, C); unit-norm rows when flagged."""
        x = np.asarray(vectors, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_channels:
            raise ValueError(f"expected (N, {self.input_channels}) input, got {x.shape}")
        hidden = np.maximum(x @ self.w1 + self.b1, 0.0)
        out = hidden @ self.w2 + self.b2
        if self.normalize:
            norms = np.linalg.norm(out, axis=1, keepdims=True)
            if np.any(norms == 0.0):
                raise ValueError("cannot normalize a zero projection vector")
            out = out / norms
        return out


def project(fmap: FeatureMap, head: ProjectionHead) -> FeatureMap:
    """Apply the projection head at every spatial position."""
    if fmap.channels != head.input_channels:
        raise ValueError(
            f"channel mismatch: map has {fmap.channels}, head expects {head.input_channels}"
        )
    out = head.apply(fmap.flattened())
    return FeatureMap(out.reshape(fmap.height, fmap.width, head.output_channels).astype(np.float32))


def downsample_labels(labels: ObjectLabelMap, target_h: int, target_w: int) -> ObjectLabelMap:
    """Majority-vote pooling of a label raster; ties go to the smaller id."""
    h, w = labels.height, labels.width
    if target_h < 1 or target_w < 1:
        raise ValueError("target dims must be positive")
    if h % target_h or w % target_w:
        raise ValueError(f"target dims {target_h}x{target_w} must divide source {h}x{w}")
    bh, bw = h // target_h, w // target_w
    blocks = labels.labels.reshape(target_h, bh, target_w, bw).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(target_h, target_w, bh * bw)
    top = int(labels.labels.max()) if labels.labels.size else 0
    counts = np.stack([(blocks == i).sum(axis=2) for i in range(top + 1)], axis=0)
    # argmax returns the first maximum, which is the smaller id.
    pooled = counts.argmax(axis=0).astype(np.int32)
    return ObjectLabelMap(pooled, num_objects=labels.num_objects)


def object_feature_sets(features, labels: ObjectLabelMap) -> dict[int, np.ndarray]:
    """Partition per-position feature vectors by object id (background id 0 included)."""
    if isinstance(features, FeatureMap):
        if (features.height, features.width) != (labels.height, labels.width):
            raise ValueError("features and labels must share the spatial grid")
        flat = features.flattened()
    else:
        flat = np.asarray(features)
        if flat.ndim != 2 or flat.shape[0] != labels.height * labels.width:
            raise ValueError("features must be a FeatureMap or an (HW, C) array")
    ids = labels.labels.ravel()
    return {
        int(obj): flat[ids == obj].astype(np.float64)
        for obj in np.unique(ids)
    }


def merge_feature_sets(sets: list[Mapping[int, np.ndarray]]) -> dict[int, np.ndarray]:
    """Union of per-object sets across frames (used for the keyframe side)."""
    merged: dict[int, list[np.ndarray]] = {}
    for one in sets:
        for obj, vecs in one.items():
            if len(vecs):
                merged.setdefault(int(obj), []).append(np.asarray(vecs, dtype=np.float64))
    return {obj: np.concatenate(parts, axis=0) for obj, parts in merged.items()}


@dataclass(frozen=True)
class ContrastiveBatch:
    """A balanced anchor set with per-object positive and negative index sets.

    ``features`` holds every participating vector once; anchors, positives,
    and negatives address rows of it, so the gradient of the loss is a single
    (n, C) array aligned with ``features``.  Per object, positive and negative
    index sets are disjoint and every anchor has at least one positive.
    """

    features: np.ndarray
    anchor_index: np.ndarray
    anchor_object: np.ndarray
    positives: dict[int, np.ndarray]
    negatives: dict[int, np.ndarray]
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        feats = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "anchor_index", np.asarray(self.anchor_index, dtype=np.int64))
        object.__setattr__(self, "anchor_object", np.asarray(self.anchor_object, dtype=np.int64))
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        for obj in np.unique(self.anchor_object):
            pos = self.positives.get(int(obj))
            if pos is None or len(pos) == 0:
                raise ValueError(f"object {obj} has anchors but no positives")
            neg = self.negatives.get(int(obj), np.empty(0, dtype=np.int64))
            if np.intersect1d(pos, neg).size:
                raise ValueError(f"object {obj} has overlapping positive and negative sets")

    @property
    def anchor_count(self) -> int:
        return self.anchor_index.shape[0]

    def anchor_counts_per_object(self) -> dict[int, int]:
        objs, counts = np.unique(self.anchor_object, return_counts=True)
        return {int(o): int(c) for o, c in zip(objs, counts)}


def sample_anchor_set(
    anchor_sets: Mapping[int, np.ndarray],
    keyframe_sets: Mapping[int, np.ndarray],
    seed: int = 0,
    temperature: float = DEFAULT_TEMPERATURE,
) -> ContrastiveBatch:
    """Balanced on-the-fly anchor sampling.

    Only objects with at least one query-frame feature and one keyframe
    feature participate.  m is the smallest query-frame feature count among
    them; every participating object contributes exactly m anchors drawn
    uniformly without replacement.  Positives of an object are all its
    keyframe features; its negatives are the sampled anchors of the other
    objects.  Deterministic given the seed.
    """
    participating = sorted(
        obj
        for obj, vecs in anchor_sets.items()
        if len(vecs) > 0 and len(keyframe_sets.get(obj, ())) > 0
    )
    if not participating:
        raise ValueError("no object has both anchor and positive features")
    m = min(len(anchor_sets[obj]) for obj in participating)

    rng = np.random.default_rng(seed)
    anchor_vecs: list[np.ndarray] = []
    anchor_obj: list[int] = []
    anchor_rows: dict[int, np.ndarray] = {}
    row = 0
    for obj in participating:
        pool = np.asarray(anchor_sets[obj], dtype=np.float64)
        picked = rng.choice(len(pool), size=m, replace=False)
        anchor_vecs.append(pool[np.sort(picked)])
        anchor_obj.extend([obj] * m)
        anchor_rows[obj] = np.arange(row, row + m, dtype=np.int64)
        row += m

    positive_rows: dict[int, np.ndarray] = {}
    positive_vecs: list[np.ndarray] = []
    for obj in participating:
        vecs = np.asarray(keyframe_sets[obj], dtype=np.float64)
        positive_rows[obj] = np.arange(row, row + len(vecs), dtype=np.int64)
        positive_vecs.append(vecs)
        row += len(vecs)

    features = np.concatenate(anchor_vecs + positive_vecs, axis=0)
    anchor_index = np.concatenate([anchor_rows[obj] for obj in participating])
    negatives = {
        obj: np.concatenate([anchor_rows[o] for o in participating if o != obj])
        if len(participating) > 1
        else np.empty(0, dtype=np.int64)
        for obj in participating
    }
    return ContrastiveBatch(
        features=features,
        anchor_index=anchor_index,
        anchor_object=np.asarray(anchor_obj, dtype=np.int64),
        positives=positive_rows,
        negatives=negatives,
        temperature=temperature,
    )


def contrastive_loss(batch: ContrastiveBatch) -> tuple[float, np.ndarray]:
    """Cross-frame InfoNCE value and its analytic gradient.

    Per anchor i and positive j+, the term is
    -log( exp(s+) / (exp(s+) + sum_{j-} exp(s-)) ) with s = z.z'/temperature,
    averaged 1/|anchors| * 1/|positives of i|.  Returns the scalar loss and
    d loss / d features, one row per row of ``batch.features`` (a vector that
    serves several roles accumulates all of them).  All exponentials run
    through shifted/log-sum-exp forms, so no intermediate can overflow.
    """
    if batch.temperature <= 0:
        raise ValueError("temperature must be > 0")
    n_anchors = batch.anchor_count
    if n_anchors == 0:
        raise ValueError("empty anchor set")
    feats = batch.features
    tau = float(batch.temperature)
    grads = np.zeros_like(feats)
    total = 0.0
    for a, obj in zip(batch.anchor_index, batch.anchor_object):
        pos = batch.positives[int(obj)]
        neg = batch.negatives.get(int(obj), np.empty(0, dtype=np.int64))
        z = feats[a]
        sp = feats[pos] @ z / tau
        coef = 1.0 / (n_anchors * len(pos))
        if len(neg) == 0:
            # log(exp(sp) / exp(sp)) contributes 0 loss and 0 gradient.
            continue
        sn = feats[neg] @ z / tau
        sn_max = sn.max()
        lse_neg = sn_max + np.log(np.exp(sn - sn_max).sum())
        lse = np.logaddexp(sp, lse_neg)
        total += coef * float((lse - sp).sum())

        p_plus = np.exp(sp - lse)
        # Negative-side softmax mass summed over the positive terms:
        # W_n = sum_j exp(sn_n - lse_j) = exp(sn_n + c), c = log sum_j exp(-lse_j).
        neg_lse_max = (-lse).max()
        c = neg_lse_max + np.log(np.exp(-lse - neg_lse_max).sum())
        w_neg = np.exp(sn + c)

        grads[a] += coef / tau * ((p_plus - 1.0) @ feats[pos] + w_neg @ feats[neg])
        grads[pos] += coef / tau * (p_plus - 1.0)[:, None] * z
        grads[neg] += coef / tau * w_neg[:, None] * z
    return total, grads


def finite_difference_gradients(batch: ContrastiveBatch, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of the loss w.r.t. every feature coordinate."""
    base = batch.features.copy()
    fd = np.zeros_like(base)
    for i in range(base.shape[0]):
        for j in range(base.shape[1]):
            for sign, slot in ((+1, 0), (-1, 1)):
                bumped = base.copy()
                bumped[i, j] += sign * step
                shifted = ContrastiveBatch(
                    features=bumped,
                    anchor_index=batch.anchor_index,
                    anchor_object=batch.anchor_object,
                    positives=batch.positives,
                    negatives=batch.negatives,
                    temperature=batch.temperature,
                )
                value, _ = contrastive_loss(shifted)
                fd[i, j] += value if sign > 0 else -value
            fd[i, j] /= 2.0 * step
    return fd


def gradient_check(batch: ContrastiveBatch, step: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    Per coordinate the error is |analytic - numeric| / max(1, |numeric|), so
    near-zero coordinates are judged on absolute error.
    """
    _, analytic = contrastive_loss(batch)
    numeric = finite_difference_gradients(batch, step=step)
    denom = np.maximum(1.0, np.abs(numeric))
    return float((np.abs(analytic - numeric) / denom).max())
