"""Segmentation quality metrics: region similarity J, contour accuracy F, J&F."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence  # noqa: F401 (Sequence used in annotations)

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt

from .tensor_io import ObjectLabelMap

# 4-connectivity cross, so diagonal neighbors do not count as adjacency.
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def default_boundary_tolerance(height: int, width: int) -> int:
    """ceil of 0.8% of the image diagonal, the usual evaluation convention."""
    return int(math.ceil(0.008 * math.hypot(height, width)))


def _check_dims(pred: ObjectLabelMap, gt: ObjectLabelMap) -> None:
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ValueError(
            f"dimension mismatch: prediction {pred.height}x{pred.width} "
            f"vs ground truth {gt.height}x{gt.width}"
        )


def region_similarity(pred: ObjectLabelMap, gt: ObjectLabelMap, object_id: int) -> float:
    """Intersection over union of one object's binary masks (1 when both empty)."""
    _check_dims(pred, gt)
    p = pred.labels == object_id
    g = gt.labels == object_id
    union = int(np.logical_or(p, g).sum())
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def _boundary(mask: np.ndarray) -> np.ndarray:
    """Object pixels 4-adjacent to a non-object pixel or the frame edge."""
    if not mask.any():
        return np.zeros_like(mask)
    interior = binary_erosion(mask, structure=_CROSS, border_value=0)
    return mask & ~interior


def contour_accuracy(
    pred: ObjectLabelMap,
    gt: ObjectLabelMap,
    object_id: int,
    tolerance: int | None = None,
) -> float:
    """Boundary F-measure: 2PR / (P + R) with matches within ``tolerance`` pixels.

    Precision is the fraction of predicted boundary pixels within Euclidean
    distance ``tolerance`` of the ground-truth boundary; recall is symmetric.
    Returns 1 when both boundaries are empty, 0 when only one is.
    """
    _check_dims(pred, gt)
    if tolerance is None:
        tolerance = default_boundary_tolerance(pred.height, pred.width)
    pb = _boundary(pred.labels == object_id)
    gb = _boundary(gt.labels == object_id)
    if not pb.any() and not gb.any():
        return 1.0
    if not pb.any() or not gb.any():
        return 0.0
    dist_to_gt = distance_transform_edt(~gb)
    dist_to_pred = distance_transform_edt(~pb)
    precision = float((dist_to_gt[pb] <= tolerance).mean())
    recall = float((dist_to_pred[gb] <= tolerance).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class MetricReport:
    """Per-object and mean J/F plus their average, with an optional
    seen/unseen split (J_s, F_s, J_u, F_u)."""

    per_object: dict[int, tuple[float, float]]
    mean_j: float
    mean_f: float
    jf: float
    split: dict[str, float] | None = None

    def to_csv(self) -> str:
        lines = ["object,J,F"]
        for obj in sorted(self.per_object):
            j, f = self.per_object[obj]
            lines.append(f"{obj},{j:.6f},{f:.6f}")
        lines.append(f"mean_J,{self.mean_j:.6f}")
        lines.append(f"mean_F,{self.mean_f:.6f}")
        lines.append(f"JandF,{self.jf:.6f}")
        if self.split is not None:
            for name in ("J_s", "F_s", "J_u", "F_u"):
                lines.append(f"{name},{self.split[name]:.6f}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        lines = [f"{'object':>8} {'J':>8} {'F':>8}"]
        for obj in sorted(self.per_object):
            j, f = self.per_object[obj]
            lines.append(f"{obj:>8d} {j:>8.4f} {f:>8.4f}")
        lines.append(f"{'mean':>8} {self.mean_j:>8.4f} {self.mean_f:>8.4f}")
        lines.append(f"{'J&F':>8} {self.jf:>8.4f}")
        if self.split is not None:
            s = self.split
            lines.append(
                f"{'seen':>8} {s['J_s']:>8.4f} {s['F_s']:>8.4f}"
            )
            lines.append(
                f"{'unseen':>8} {s['J_u']:>8.4f} {s['F_u']:>8.4f}"
            )
        return "\n".join(lines)


def _mean(values: list[float]) -> float:
    return float(np.mean(values)) if values else float("nan")


def evaluate(
    result,
    gt: Sequence[ObjectLabelMap | None],
    seen_ids: Iterable[int] | None = None,
    tolerance: int | None = None,
) -> MetricReport:
    """Score predictions against ground truth over annotated frames.

    ``result`` is a SegmentationResult or a plain sequence of label maps of
    the same length as ``gt``.  Frames with no ground truth are skipped and
    frame 1 is excluded (it is given).  Object ids come from the union of the
    ground-truth maps.  When ``seen_ids`` is provided the report also carries
    means split into seen and unseen ids.
    """
    predictions = list(result.labels) if hasattr(result, "labels") else list(result)
    gt = list(gt)
    if len(predictions) != len(gt):
        raise ValueError(f"frame count mismatch: {len(predictions)} predictions vs {len(gt)} annotations")
    counted = [t for t in range(1, len(gt)) if gt[t] is not None]
    if not counted:
        raise ValueError("no annotated frames beyond frame 1")

    ids = sorted(
        {int(v) for m in gt if m is not None for v in np.unique(m.labels) if v > 0}
    )
    per_object: dict[int, tuple[float, float]] = {}
    for obj in ids:
        js = [region_similarity(predictions[t], gt[t], obj) for t in counted]
        fs = [contour_accuracy(predictions[t], gt[t], obj, tolerance=tolerance) for t in counted]
        per_object[obj] = (_mean(js), _mean(fs))

    mean_j = _mean([jf[0] for jf in per_object.values()])
    mean_f = _mean([jf[1] for jf in per_object.values()])
    report_split = None
    if seen_ids is not None:
        seen = {int(i) for i in seen_ids}
        seen_vals = [per_object[o] for o in per_object if o in seen]
        unseen_vals = [per_object[o] for o in per_object if o not in seen]
        report_split = {
            "J_s": _mean([v[0] for v in seen_vals]),
            "F_s": _mean([v[1] for v in seen_vals]),
            "J_u": _mean([v[0] for v in unseen_vals]),
            "F_u": _mean([v[1] for v in unseen_vals]),
        }
    return MetricReport(
        per_object=per_object,
        mean_j=mean_j,
        mean_f=mean_f,
        jf=(mean_j + mean_f) / 2.0,
        split=report_split,
    )
