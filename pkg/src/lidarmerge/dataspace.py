"""Cross-sensor data harmonization: origin offsets, rasterization into voxel
grids, decoupled per-dataset normalization statistics, and per-class radial
distribution histograms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    InconsistentInputError,
    InvalidInputError,
    MissingLabelsError,
    SchemaError,
    UnknownDatasetError,
)
from .geometry import PointCloud


@dataclass(frozen=True)
class DatasetProfile:
    """Per-dataset harmonization parameters."""

    dataset_id: str
    origin_offset: np.ndarray   # (3,) meters, added to every point
    voxel_size: np.ndarray      # (3,) meters
    class_count: int = 0

    def __post_init__(self):
        offset = np.asarray(self.origin_offset, dtype=float).reshape(3)
        voxel = np.asarray(self.voxel_size, dtype=float).reshape(3)
        if not (voxel > 0).all():
            raise InvalidInputError("voxel_size components must be strictly positive")
        object.__setattr__(self, "origin_offset", offset)
        object.__setattr__(self, "voxel_size", voxel)


class VoxelGrid:
    """Assignment of points to axis-aligned cells anchored at the origin.

    Cell ``k`` contains exactly the points with ``floor(p / voxel_size) == k``.
    Cells are enumerated sorted by z index, then y, then x, so downstream
    outputs are stable across runs.  The point lists are kept as grouped
    index arrays; ``cells()`` materializes the mapping on demand.
    """

    def __init__(self, voxel_size: np.ndarray, cell_ids: np.ndarray,
                 point_order: np.ndarray, cell_starts: np.ndarray, num_points: int):
        self.voxel_size = voxel_size
        self.cell_ids = cell_ids          # (m, 3) int64, z-major sorted
        self.point_order = point_order    # (N,) original indices grouped per cell
        self.cell_starts = cell_starts    # (m + 1,) offsets into point_order
        self.num_points = num_points

    @property
    def num_cells(self) -> int:
        return self.cell_ids.shape[0]

    def __len__(self) -> int:
        return self.num_cells

    def cell_sizes(self) -> np.ndarray:
        return np.diff(self.cell_starts)

    def cells(self) -> dict[tuple[int, int, int], list[int]]:
        """Mapping cell index -> contained point indices, in enumeration order."""
        out: dict[tuple[int, int, int], list[int]] = {}
        for i in range(self.num_cells):
            key = tuple(int(c) for c in self.cell_ids[i])
            out[key] = self.point_order[self.cell_starts[i]:self.cell_starts[i + 1]].tolist()
        return out


def _as_coords(cloud) -> np.ndarray:
    coords = cloud.coords if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise InvalidInputError(f"expected (N, 3) coordinates, got {coords.shape}")
    if not np.isfinite(coords).all():
        raise InvalidInputError("coordinates contain non-finite values")
    return coords


def apply_origin_offset(cloud: PointCloud, profile: DatasetProfile) -> PointCloud:
    """Shift all coordinates by the profile's origin offset; labels unchanged."""
    return PointCloud(
        coords=cloud.coords + profile.origin_offset,
        intensity=None if cloud.intensity is None else cloud.intensity.copy(),
        semantic=None if cloud.semantic is None else cloud.semantic.copy(),
        instance=None if cloud.instance is None else cloud.instance.copy(),
    )


def voxelize(cloud, voxel_size) -> VoxelGrid:
    """Rasterize points into cells of ``floor(p / voxel_size)``.

    The grid is anchored at the coordinate origin (not the cloud's min
    corner) so cell indices are comparable across scans.
    """
    coords = _as_coords(cloud)
    voxel = np.broadcast_to(np.asarray(voxel_size, dtype=float).reshape(-1), (3,)).copy() \
        if np.asarray(voxel_size).size in (1, 3) else None
    if voxel is None:
        raise InvalidInputError("voxel_size must be a scalar or 3-vector")
    if not (voxel > 0).all():
        raise InvalidInputError("voxel_size must be strictly positive")

    scaled = np.floor(coords / voxel)
    if scaled.size and not (np.abs(scaled) < 2.0 ** 62).all():
        raise InvalidInputError("coordinates too large for the given voxel size")
    idx = scaled.astype(np.int64)
    n = idx.shape[0]
    if n == 0:
        return VoxelGrid(voxel, np.empty((0, 3), np.int64), np.empty(0, np.int64),
                         np.zeros(1, np.int64), 0)

    # pack (z, y, x) into one linear key when extents allow, so one stable
    # sort yields the z-major cell order with original point order per cell
    lo = idx.min(axis=0)
    extent = [int(e) + 1 for e in idx.max(axis=0) - lo]
    if extent[0] * extent[1] * extent[2] < 2 ** 62:
        key = ((idx[:, 2] - lo[2]) * extent[1] + (idx[:, 1] - lo[1])) * extent[0] \
            + (idx[:, 0] - lo[0])
        order = np.argsort(key, kind="stable")
        sorted_key = key[order]
        new_cell = np.empty(n, dtype=bool)
        new_cell[0] = True
        new_cell[1:] = sorted_key[1:] != sorted_key[:-1]
    else:
        order = np.lexsort((np.arange(n), idx[:, 0], idx[:, 1], idx[:, 2]))
        sorted_idx = idx[order]
        new_cell = np.empty(n, dtype=bool)
        new_cell[0] = True
        new_cell[1:] = (sorted_idx[1:] != sorted_idx[:-1]).any(axis=1)
    starts = np.flatnonzero(new_cell)
    cell_ids = idx[order[starts]]
    cell_starts = np.concatenate([starts, [n]]).astype(np.int64)
    return VoxelGrid(voxel, cell_ids, order.astype(np.int64), cell_starts, n)


def downsample_one_per_voxel(grid: VoxelGrid, cloud: PointCloud) -> PointCloud:
    """Keep one point per cell (the smallest original index), in cell order."""
    if grid.num_points != len(cloud):
        raise InconsistentInputError(
            f"grid was built from {grid.num_points} points, cloud has {len(cloud)}")
    if grid.num_cells == 0:
        return PointCloud(coords=np.empty((0, 3)))
    keep = np.minimum.reduceat(grid.point_order, grid.cell_starts[:-1])
    return PointCloud(
        coords=cloud.coords[keep],
        intensity=None if cloud.intensity is None else cloud.intensity[keep],
        semantic=None if cloud.semantic is None else cloud.semantic[keep],
        instance=None if cloud.instance is None else cloud.instance[keep],
    )


class NormStats:
    """Streaming per-dataset, per-channel mean/variance (Welford form).

    Statistics for different dataset ids never mix.  Updates return a new
    object; partial stats computed over shards merge associatively and agree
    with sequential accumulation to floating-point reassociation error.
    """

    def __init__(self, entries: dict[str, tuple[int, np.ndarray, np.ndarray]] | None = None):
        # dataset_id -> (count, mean, m2) where variance = m2 / count
        self._entries = dict(entries) if entries else {}

    def datasets(self) -> list[str]:
        return list(self._entries)

    def count(self, dataset_id: str) -> int:
        return self._require(dataset_id)[0]

    def mean(self, dataset_id: str) -> np.ndarray:
        return self._require(dataset_id)[1].copy()

    def variance(self, dataset_id: str) -> np.ndarray:
        count, _, m2 = self._require(dataset_id)
        return m2 / count

    def _require(self, dataset_id: str):
        if dataset_id not in self._entries:
            raise UnknownDatasetError(f"no statistics for dataset {dataset_id!r}")
        return self._entries[dataset_id]


def update_norm_stats(stats: NormStats, dataset_id: str, features: np.ndarray) -> NormStats:
    """Fold a feature batch into one dataset's running statistics."""
    features = np.asarray(features, dtype=float)
    if features.ndim != 2:
        raise InvalidInputError(f"features must be 2-D, got shape {features.shape}")
    if not np.isfinite(features).all():
        raise InvalidInputError("features contain non-finite values")
    entries = dict(stats._entries)
    n_b = features.shape[0]
    if n_b == 0:
        return NormStats(entries)
    mean_b = features.mean(axis=0)
    m2_b = ((features - mean_b) ** 2).sum(axis=0)
    if dataset_id in entries:
        n_a, mean_a, m2_a = entries[dataset_id]
        if mean_a.shape != mean_b.shape:
            raise SchemaError(
                f"dataset {dataset_id!r} has {mean_a.shape[0]} channels, batch has {mean_b.shape[0]}")
        n = n_a + n_b
        delta = mean_b - mean_a
        mean = mean_a + delta * (n_b / n)
        m2 = m2_a + m2_b + delta ** 2 * (n_a * n_b / n)
        entries[dataset_id] = (n, mean, m2)
    else:
        entries[dataset_id] = (n_b, mean_b, m2_b)
    return NormStats(entries)


def merge_norm_stats(a: NormStats, b: NormStats) -> NormStats:
    """Associatively merge two partial statistics objects."""
    entries = dict(a._entries)
    for dataset_id, (n_b, mean_b, m2_b) in b._entries.items():
        if dataset_id not in entries:
            entries[dataset_id] = (n_b, mean_b.copy(), m2_b.copy())
            continue
        n_a, mean_a, m2_a = entries[dataset_id]
        if mean_a.shape != mean_b.shape:
            raise SchemaError(f"channel count mismatch for dataset {dataset_id!r}")
        n = n_a + n_b
        delta = mean_b - mean_a
        entries[dataset_id] = (
            n,
            mean_a + delta * (n_b / n),
            m2_a + m2_b + delta ** 2 * (n_a * n_b / n),
        )
    return NormStats(entries)


def normalize(features: np.ndarray, stats: NormStats, dataset_id: str,
              epsilon: float = 1e-5, batch_stats: bool = False) -> np.ndarray:
    """Standardize features with that dataset's statistics only.

    ``batch_stats=True`` normalizes by the batch's own mean/variance instead
    of the stored running statistics (both inference conventions are in use;
    the default is the frozen running form).
    """
    features = np.asarray(features, dtype=float)
    if batch_stats:
        if features.shape[0] < 2:
            raise InvalidInputError("batch statistics need at least 2 rows")
        mean = features.mean(axis=0)
        var = features.var(axis=0)
    else:
        count, mean, m2 = stats._require(dataset_id)
        if count < 2:
            raise InvalidInputError(
                f"dataset {dataset_id!r} has only {count} accumulated sample(s); need >= 2")
        if features.shape[1] != mean.shape[0]:
            raise SchemaError(
                f"features have {features.shape[1]} channels, stats have {mean.shape[0]}")
        var = m2 / count
    return (features - mean) / np.sqrt(var + epsilon)


def range_class_histogram(cloud: PointCloud, bin_width: float = 0.5,
                          max_range: float = 50.0) -> dict[int, np.ndarray]:
    """Per-class counts of points binned by planar radius from the origin.

    Bins are ``[0, bin_width), [bin_width, 2*bin_width), ...``; points at or
    beyond ``max_range`` are dropped.  Returns ``{class_id: counts}`` with
    keys in ascending order.
    """
    if cloud.semantic is None:
        raise MissingLabelsError("range_class_histogram needs semantic labels")
    if bin_width <= 0 or max_range <= 0:
        raise InvalidInputError("bin_width and max_range must be positive")
    nbins = int(np.ceil(max_range / bin_width))
    radius = np.hypot(cloud.coords[:, 0], cloud.coords[:, 1])
    keep = radius < max_range
    radius = radius[keep]
    labels = cloud.semantic[keep]
    bins = np.minimum((radius / bin_width).astype(np.int64), nbins - 1)

    out: dict[int, np.ndarray] = {}
    for cls in np.unique(labels):
        sel = labels == cls
        out[int(cls)] = np.bincount(bins[sel], minlength=nbins).astype(np.int64)
    return out
