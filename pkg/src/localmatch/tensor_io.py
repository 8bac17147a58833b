"""Tensor containers, the FMAP/MASK file formats, and the synthetic generator.

File formats are deliberately minimal so any language can parse them:

* FMAP: one ASCII header line ``FMAP <H> <W> <D>\\n`` followed by H*W*D
  little-endian IEEE-754 binary32 values in row-major order
  (row, then column, then channel).
* MASK: one ASCII header line ``MASK <H> <W>\\n`` followed by one byte per
  pixel (object id as gray level, 0 = background).

Both round-trip bit-exactly, which the oracle tests depend on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FMAP_MAGIC = b"FMAP"
MASK_MAGIC = b"MASK"

Translation = tuple[int, int]


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FeatureMap:
    """Dense H x W x D float32 feature tensor for one frame.

    Values are stored row-major (row, then column, then channel) and are
    immutable after construction.  Non-finite values are rejected.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"feature map must be 3-d (H, W, D), got shape {arr.shape}")
        arr = arr.astype(np.float32, copy=not arr.flags.c_contiguous or arr.dtype != np.float32)
        if arr.size and not np.isfinite(arr).all():
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def flattened(self) -> np.ndarray:
        """View of shape (H*W, D) in raster order."""
        return self.data.reshape(-1, self.data.shape[2])


@dataclass(frozen=True)
class ObjectLabelMap:
    """H x W integer object-id raster: 0 is background, 1..num_objects are objects."""

    labels: np.ndarray
    num_objects: int | None = None

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2:
            raise ValueError(f"label map must be 2-d (H, W), got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError("label map must hold integers")
        arr = arr.astype(np.int32)
        if arr.size and arr.min() < 0:
            raise ValueError("object ids must be non-negative")
        declared = self.num_objects
        highest = int(arr.max()) if arr.size else 0
        if declared is None:
            declared = highest
        elif highest > declared:
            raise ValueError(f"label {highest} exceeds declared object count {declared}")
        object.__setattr__(self, "labels", _freeze(arr))
        object.__setattr__(self, "num_objects", int(declared))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class VideoSequence:
    """Ordered frames plus the first-frame reference mask (and optional ground truth).

    All frames share one geometry.  ``feature_scale`` records the image-to-feature
    downscale factor when the reference mask was provided at image resolution;
    it stays 1 when everything lives at feature resolution.
    """

    frames: tuple[FeatureMap, ...]
    first_frame_mask: ObjectLabelMap
    ground_truth: tuple[ObjectLabelMap, ...] | None = None
    feature_scale: int = 1

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValueError("video must contain at least one frame")
        h, w, d = frames[0].height, frames[0].width, frames[0].channels
        for t, f in enumerate(frames):
            if (f.height, f.width, f.channels) != (h, w, d):
                raise ValueError(f"frame {t} geometry differs from frame 0")
        mask = self.first_frame_mask
        scale = int(self.feature_scale)
        if scale < 1:
            raise ValueError("feature_scale must be >= 1")
        if (mask.height, mask.width) != (h * scale, w * scale):
            raise ValueError(
                "first-frame mask must match the frame geometry at feature "
                "resolution or at the declared image resolution"
            )
        gt = self.ground_truth
        if gt is not None:
            gt = tuple(gt)
            if len(gt) != len(frames):
                raise ValueError("ground truth length must match frame count")
            for t, m in enumerate(gt):
                if m is not None and (m.height, m.width) != (h, w):
                    raise ValueError(f"ground-truth mask {t} geometry differs from frames")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "ground_truth", gt)
        object.__setattr__(self, "feature_scale", scale)

    def __len__(self) -> int:
        return len(self.frames)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def _read_header(fh, magic: bytes, n_fields: int, path: Path) -> list[int]:
    line = fh.readline(256)
    parts = line.split()
    if len(parts) != 1 + n_fields or parts[0] != magic or not line.endswith(b"\n"):
        raise ValueError(f"{path}: malformed header {line!r}")
    try:
        dims = [int(p) for p in parts[1:]]
    except ValueError as exc:
        raise ValueError(f"{path}: malformed header {line!r}") from exc
    if any(d <= 0 for d in dims):
        raise ValueError(f"{path}: malformed header (non-positive dimension)")
    return dims


def load_feature_map(path: str | Path) -> FeatureMap:
    """Read an FMAP file.  Errors on malformed headers, truncated or oversized
    payloads, and non-finite values."""
    path = Path(path)
    with open(path, "rb") as fh:
        h, w, d = _read_header(fh, FMAP_MAGIC, 3, path)
        expected = h * w * d * 4
        payload = fh.read(expected)
        if len(payload) != expected or fh.read(1):
            raise ValueError(f"{path}: payload length mismatch")
    values = np.frombuffer(payload, dtype="<f4").reshape(h, w, d)
    if not np.isfinite(values).all():
        raise ValueError(f"{path}: non-finite values in payload")
    return FeatureMap(values)


def save_feature_map(fmap: FeatureMap, path: str | Path) -> None:
    """Write an FMAP file readable by :func:`load_feature_map`, bit-identical payload."""
    if fmap.data.size == 0:
        raise ValueError("empty tensor")
    path = Path(path)
    header = f"FMAP {fmap.height} {fmap.width} {fmap.channels}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(fmap.data, dtype="<f4").tobytes())


def load_label_map(path: str | Path) -> ObjectLabelMap:
    """Read a MASK file (one byte per pixel)."""
    path = Path(path)
    with open(path, "rb") as fh:
        h, w = _read_header(fh, MASK_MAGIC, 2, path)
        payload = fh.read(h * w)
        if len(payload) != h * w or fh.read(1):
            raise ValueError(f"{path}: payload length mismatch")
    return ObjectLabelMap(np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.int32))


def save_label_map(mask: ObjectLabelMap, path: str | Path) -> None:
    """Write a MASK file.  Object ids above 255 do not fit the format."""
    if mask.labels.size == 0:
        raise ValueError("empty tensor")
    if int(mask.labels.max()) > 255:
        raise ValueError("MASK format stores one byte per pixel (ids must be <= 255)")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"MASK {mask.height} {mask.width}\n".encode("ascii"))
        fh.write(mask.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Synthetic videos
# ---------------------------------------------------------------------------


def _object_vectors(rng: np.random.Generator, channels: int, count: int) -> np.ndarray:
    # QR of a Gaussian matrix gives exactly orthonormal columns, so the
    # pairwise-dot bound holds with a wide margin; needs channels >= count.
    if channels < count:
        raise ValueError(
            f"channels too small to host {count - 1} near-orthogonal object vectors "
            f"(need at least {count} channels)"
        )
    q, _ = np.linalg.qr(rng.standard_normal((channels, count)))
    vecs = q.T
    gram = np.abs(vecs @ vecs.T - np.eye(count))
    assert gram.max() <= 0.1, "object vectors are not near-orthogonal"
    return vecs


def _normalize_motion(motion, frames: int) -> np.ndarray:
    if motion is None:
        steps = np.zeros((max(frames - 1, 0), 2), dtype=np.int64)
    else:
        arr = np.asarray(motion, dtype=np.int64)
        if arr.ndim == 1 and arr.shape == (2,):
            arr = np.tile(arr, (max(frames - 1, 0), 1))
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValueError("motion must be one (dy, dx) pair or a list of them")
        if arr.shape[0] != frames - 1:
            raise ValueError(
                f"motion must give one (dy, dx) step per frame transition "
                f"({frames - 1} steps for {frames} frames, got {arr.shape[0]})"
            )
        steps = arr
    offsets = np.zeros((frames, 2), dtype=np.int64)
    if frames > 1:
        offsets[1:] = np.cumsum(steps, axis=0)
    return offsets


def synthesize_video(
    height: int,
    width: int,
    channels: int,
    frames: int,
    objects: int,
    motion: Sequence[Translation] | Translation | None = None,
    seed: int = 0,
    noise: float = 0.05,
) -> VideoSequence:
    """Generate a deterministic test video without learned encoders.

    Each object is a rectangle carrying a distinct constant unit-norm feature
    vector (pairwise |dot| <= 0.1; the background gets its own vector), all
    rectangles translate rigidly by the per-frame ``motion`` steps, and one
    uniform noise field of amplitude ``noise`` is added to every frame so a
    zero-motion video is bit-identical across time.  Ground-truth label maps
    are emitted per frame.
    """
    if objects < 1:
        raise ValueError("objects must be >= 1")
    if frames < 1:
        raise ValueError("frames must be >= 1")
    if height < 1 or width < 1 or channels < 1:
        raise ValueError("geometry must be positive")
    if noise < 0:
        raise ValueError("noise amplitude must be >= 0")

    offsets = _normalize_motion(motion, frames)
    rng = np.random.default_rng(seed)
    vectors = _object_vectors(rng, channels, objects + 1)

    margin = 2
    stride_y = (height - 2 * margin) // objects
    stride_x = (width - 2 * margin) // objects
    if stride_y < 1 or stride_x < 1:
        raise ValueError(f"frame {height}x{width} too small for {objects} objects")
    rect_h = max(1, (2 * stride_y) // 3)
    rect_w = max(1, (2 * stride_x) // 3)
    rects = [
        (margin + i * stride_y, margin + i * stride_x) for i in range(objects)
    ]

    lo_dy, hi_dy = int(offsets[:, 0].min()), int(offsets[:, 0].max())
    lo_dx, hi_dx = int(offsets[:, 1].min()), int(offsets[:, 1].max())
    for top, left in rects:
        if top + lo_dy < 0 or top + rect_h + hi_dy > height:
            raise ValueError("object leaves frame bounds")
        if left + lo_dx < 0 or left + rect_w + hi_dx > width:
            raise ValueError("object leaves frame bounds")

    noise_field = rng.uniform(-noise, noise, size=(height, width, channels)) if noise else 0.0

    frame_list: list[FeatureMap] = []
    gt_list: list[ObjectLabelMap] = []
    for t in range(frames):
        dy, dx = int(offsets[t, 0]), int(offsets[t, 1])
        labels = np.zeros((height, width), dtype=np.int32)
        for obj, (top, left) in enumerate(rects, start=1):
            r0, c0 = top + dy, left + dx
            labels[r0 : r0 + rect_h, c0 : c0 + rect_w] = obj
        features = vectors[labels] + noise_field
        frame_list.append(FeatureMap(features.astype(np.float32)))
        gt_list.append(ObjectLabelMap(labels, num_objects=objects))

    return VideoSequence(
        frames=tuple(frame_list),
        first_frame_mask=gt_list[0],
        ground_truth=tuple(gt_list),
    )
