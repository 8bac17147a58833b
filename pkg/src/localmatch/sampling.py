"""Local sampling: per-query k x k neighborhoods gathered from a memory map.

Two implementations produce bit-identical results on every input:

* :func:`sample_gather` is the im2col oracle.  Each query element slices its
  own window around its reference point, one position at a time.
* :func:`sample_shift` is the direction-based fast path.  The k*k offsets are
  processed one at a time; for each offset the whole map is shifted and
  written into the matching row block of the output, so the expensive
  per-position slicing disappears.

Out-of-bounds samples carry the pad value 0 and are marked invalid so the
matching stage can exclude them from the softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .tensor_io import FeatureMap

PAD_VALUE = np.float32(0.0)


def _kernels():
    if backend.active() == "numba":
        from . import kernels_numba as impl
    else:
        from . import kernels_numpy as impl
    return impl


@dataclass(frozen=True)
class DirectionSet:
    """The k*k sampling directions: every (dy, dx) offset of a centered square.

    Offsets enumerate the full square [-(k-1)/2, (k-1)/2]^2 in row-major
    raster order; the center (0, 0) sits at index (k*k - 1) // 2.
    """

    window: int
    offsets: np.ndarray

    def __post_init__(self):
        k = self.window
        if k < 1 or k % 2 == 0:
            raise ValueError(f"window must be odd and positive, got {k}")
        offs = np.asarray(self.offsets, dtype=np.int64)
        half = (k - 1) // 2
        expected = np.array(
            [(dy, dx) for dy in range(-half, half + 1) for dx in range(-half, half + 1)],
            dtype=np.int64,
        ).reshape(k * k, 2)
        if offs.shape != expected.shape or not np.array_equal(offs, expected):
            raise ValueError("offsets must enumerate the centered square in raster order")
        arr = np.ascontiguousarray(offs)
        arr.setflags(write=False)
        object.__setattr__(self, "offsets", arr)

    @property
    def count(self) -> int:
        return self.window * self.window

    @property
    def center_index(self) -> int:
        return (self.count - 1) // 2


def make_direction_set(k: int) -> DirectionSet:
    """Build the k*k centered offset grid.  k must be odd and >= 1."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"window must be odd and positive, got {k}")
    half = (k - 1) // 2
    offsets = np.array(
        [(dy, dx) for dy in range(-half, half + 1) for dx in range(-half, half + 1)],
        dtype=np.int64,
    ).reshape(k * k, 2)
    return DirectionSet(window=k, offsets=offsets)


@dataclass(frozen=True)
class ReferenceMap:
    """Per-query reference positions inside the memory map.

    ``positions`` has shape (HW, t, 2) holding (row, col) pairs: one row per
    query element of the ``grid`` = (h, w) raster, t selected references each.
    The sampling kernels consume one reference layer at a time; use
    :meth:`layer` to split a top-t map.
    """

    positions: np.ndarray
    grid: tuple[int, int]
    aligned: bool = False

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.int64)
        if pos.ndim == 2:
            pos = pos[:, None, :]
        if pos.ndim != 3 or pos.shape[2] != 2:
            raise ValueError(f"positions must have shape (HW, t, 2), got {pos.shape}")
        h, w = self.grid
        if pos.shape[0] != h * w:
            raise ValueError("positions row count must equal the query grid size")
        arr = np.ascontiguousarray(pos)
        arr.setflags(write=False)
        object.__setattr__(self, "positions", arr)
        object.__setattr__(self, "grid", (int(h), int(w)))

    @property
    def query_count(self) -> int:
        return self.positions.shape[0]

    @property
    def top_t(self) -> int:
        return self.positions.shape[1]

    def layer(self, index: int) -> "ReferenceMap":
        """Single-reference view: layer ``index`` of a top-t map."""
        return ReferenceMap(self.positions[:, index, :], grid=self.grid, aligned=self.aligned)


def aligned_references(height: int, width: int) -> ReferenceMap:
    """p(i) = i: every query element references its own spatial position."""
    if height < 1 or width < 1:
        raise ValueError("grid dimensions must be positive")
    rr, cc = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    positions = np.stack([rr.ravel(), cc.ravel()], axis=1)
    return ReferenceMap(positions, grid=(height, width), aligned=True)


@dataclass(frozen=True)
class SampledMatrix:
    """The packed local sample: data[i, j, :] = map[p(i) + offset(j)].

    Shape is (HW, k*k, D); out-of-bounds samples hold the pad value 0 and are
    flagged False in ``valid``.  ``grid`` carries the query raster (h, w) so
    downstream stages can rebuild spatial maps.
    """

    data: np.ndarray
    valid: np.ndarray
    grid: tuple[int, int]

    @property
    def query_count(self) -> int:
        return self.data.shape[0]

    @property
    def directions(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def _as_map_array(fmap) -> np.ndarray:
    if isinstance(fmap, FeatureMap):
        return fmap.data
    arr = np.asarray(fmap, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"map must be 3-d (H, W, D), got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def _check_args(x: np.ndarray, refs: ReferenceMap, dirs: DirectionSet) -> tuple[np.ndarray, np.ndarray]:
    if refs.top_t != 1:
        raise ValueError("sampling takes one reference layer at a time; split with ReferenceMap.layer()")
    h, w = x.shape[0], x.shape[1]
    pr = refs.positions[:, 0, 0]
    pc = refs.positions[:, 0, 1]
    if pr.size == 0:
        raise ValueError("dimension mismatch between refs and map: empty reference map")
    if pr.min() < 0 or pr.max() >= h or pc.min() < 0 or pc.max() >= w:
        raise ValueError("dimension mismatch between refs and map: reference out of bounds")
    return np.ascontiguousarray(pr), np.ascontiguousarray(pc)


def validity_mask(refs: ReferenceMap, dirs: DirectionSet, height: int, width: int) -> np.ndarray:
    """(HW, k*k) flags: True where p(i) + offset(j) lands inside the map."""
    pr = refs.positions[:, 0, 0][:, None] + dirs.offsets[None, :, 0]
    pc = refs.positions[:, 0, 1][:, None] + dirs.offsets[None, :, 1]
    return (pr >= 0) & (pr < height) & (pc >= 0) & (pc < width)


def sample_gather(fmap, refs: ReferenceMap, dirs: DirectionSet) -> SampledMatrix:
    """Slow im2col oracle: per-query window slicing (Eq. 4 behavior).

    The correctness reference for every fast path; bit-exact by contract.
    """
    x = _as_map_array(fmap)
    pr, pc = _check_args(x, refs, dirs)
    out = np.zeros((pr.shape[0], dirs.count, x.shape[2]), dtype=np.float32)
    _kernels().gather(x, pr, pc, dirs.offsets, out)
    valid = validity_mask(refs, dirs, x.shape[0], x.shape[1])
    return SampledMatrix(data=out, valid=valid, grid=refs.grid)


def sample_shift(fmap, refs: ReferenceMap, dirs: DirectionSet) -> SampledMatrix:
    """Fast direction-based path: one whole-map shift per offset.

    Bit-identical to :func:`sample_gather` on every input.
    """
    x = _as_map_array(fmap)
    pr, pc = _check_args(x, refs, dirs)
    out = np.zeros((pr.shape[0], dirs.count, x.shape[2]), dtype=np.float32)
    impl = _kernels()
    if refs.aligned and refs.grid == (x.shape[0], x.shape[1]):
        impl.shift_aligned(x, dirs.offsets, out.reshape(x.shape[0], x.shape[1], dirs.count, x.shape[2]))
    else:
        impl.shift_refs(x, pr, pc, dirs.offsets, out)
    valid = validity_mask(refs, dirs, x.shape[0], x.shape[1])
    return SampledMatrix(data=out, valid=valid, grid=refs.grid)
