"""Offset-based instance extraction: stuff filtering, point shifting,
flat-kernel mean-shift clustering, and panoptic label assembly.

The clustering is deterministic: every point seeds its own iteration,
converged modes are merged by a sequential pass in input order, and ids are
relabeled contiguously by first occurrence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InconsistentInputError, InvalidInputError, InvalidLabelError


@dataclass(frozen=True)
class InstanceConfig:
    """Mean-shift parameters; ``mode_merge_radius`` defaults to bandwidth/2."""

    bandwidth: float
    max_iterations: int = 300
    shift_tolerance: float = 1e-3
    mode_merge_radius: float | None = None
    min_cluster_size: int = 1

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise InvalidInputError("bandwidth must be positive")
        if self.shift_tolerance <= 0:
            raise InvalidInputError("shift_tolerance must be positive")
        if self.max_iterations < 1:
            raise InvalidInputError("max_iterations must be at least 1")
        if self.mode_merge_radius is not None and self.mode_merge_radius <= 0:
            raise InvalidInputError("mode_merge_radius must be positive")
        if self.min_cluster_size < 1:
            raise InvalidInputError("min_cluster_size must be at least 1")

    @property
    def merge_radius(self) -> float:
        return self.mode_merge_radius if self.mode_merge_radius is not None \
            else self.bandwidth / 2.0


@dataclass
class PanopticLabels:
    """Joint semantic/instance labeling; stuff points carry instance 0."""

    semantic: np.ndarray
    instance: np.ndarray

    def __post_init__(self):
        self.semantic = np.asarray(self.semantic, dtype=np.int64)
        self.instance = np.asarray(self.instance, dtype=np.int64)
        if self.semantic.shape != self.instance.shape or self.semantic.ndim != 1:
            raise InconsistentInputError("semantic and instance must be equal-length 1-D")

    def __len__(self) -> int:
        return self.semantic.shape[0]


def filter_thing_points(semantic: np.ndarray, thing_mask: np.ndarray) -> np.ndarray:
    """Indices of instance-bearing points, ascending."""
    semantic = np.asarray(semantic, dtype=np.int64)
    thing_mask = np.asarray(thing_mask, dtype=bool)
    if semantic.size and ((semantic < 0).any() or (semantic >= thing_mask.shape[0]).any()):
        raise InvalidLabelError("semantic id outside the class space of thing_mask")
    return np.flatnonzero(thing_mask[semantic]).astype(np.int64)


def shift_points(coords: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Move each point by its predicted center offset."""
    coords = np.asarray(coords, dtype=float)
    offsets = np.asarray(offsets, dtype=float)
    if coords.shape != offsets.shape:
        raise InconsistentInputError(
            f"coords {coords.shape} and offsets {offsets.shape} differ")
    return coords + offsets


def mean_shift_cluster(shifted: np.ndarray, cfg: InstanceConfig) -> np.ndarray:
    """Flat-kernel mean-shift over shifted points; returns ids 1..K.

    Every point seeds an iteration toward the mean of its bandwidth
    neighborhood until the displacement drops below ``shift_tolerance`` or
    ``max_iterations`` is hit.  Converged positions within
    ``merge_radius`` of an earlier mode merge into it; each point then
    joins its nearest surviving mode, and clusters below
    ``min_cluster_size`` are folded into the nearest large-enough mode
    (kept as-is when no such mode exists).
    """
    points = np.asarray(shifted, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3:
        raise InvalidInputError(f"expected (M, 3) coordinates, got {points.shape}")
    if not np.isfinite(points).all():
        raise InvalidInputError("coordinates contain non-finite values")
    m = points.shape[0]
    if m == 0:
        return np.empty(0, dtype=np.int64)

    bw2 = cfg.bandwidth ** 2
    tol2 = cfg.shift_tolerance ** 2
    pos = points.copy()
    active = np.ones(m, dtype=bool)
    for _ in range(cfg.max_iterations):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        d2 = ((pos[idx, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        within = d2 <= bw2
        counts = within.sum(axis=1)
        nonempty = counts > 0
        new_pos = pos[idx].copy()
        if nonempty.any():
            new_pos[nonempty] = (within[nonempty].astype(float) @ points) \
                / counts[nonempty, None]
        disp2 = ((new_pos - pos[idx]) ** 2).sum(axis=1)
        pos[idx] = new_pos
        active[idx[disp2 < tol2]] = False

    # merge converged modes sequentially so the result is order-stable
    merge2 = cfg.merge_radius ** 2
    modes: list[np.ndarray] = []
    for i in range(m):
        if modes:
            dist2 = ((np.asarray(modes) - pos[i]) ** 2).sum(axis=1)
            if dist2.min() <= merge2:
                continue
        modes.append(pos[i])
    mode_arr = np.asarray(modes)

    d2 = ((points[:, None, :] - mode_arr[None, :, :]) ** 2).sum(axis=2)
    assign = d2.argmin(axis=1)

    sizes = np.bincount(assign, minlength=mode_arr.shape[0])
    small = sizes < cfg.min_cluster_size
    if small.any() and (~small).any():
        large_ids = np.flatnonzero(~small)
        redo = np.flatnonzero(small[assign])
        assign[redo] = large_ids[d2[np.ix_(redo, large_ids)].argmin(axis=1)]

    # contiguous 1..K ids by first occurrence in input order
    _, first_pos, inverse = np.unique(assign, return_index=True, return_inverse=True)
    rank = np.empty(first_pos.shape[0], dtype=np.int64)
    rank[np.argsort(first_pos, kind="stable")] = np.arange(1, first_pos.shape[0] + 1)
    return rank[inverse]


def assemble_panoptic(semantic: np.ndarray, thing_indices: np.ndarray,
                      cluster_ids: np.ndarray, thing_mask: np.ndarray) -> PanopticLabels:
    """Combine semantic labels with clustered thing instances.

    Stuff points get instance 0; thing points get their cluster id remapped
    to a contiguous 1..K range in first-occurrence order.
    """
    semantic = np.asarray(semantic, dtype=np.int64)
    thing_indices = np.asarray(thing_indices, dtype=np.int64)
    cluster_ids = np.asarray(cluster_ids, dtype=np.int64)
    thing_mask = np.asarray(thing_mask, dtype=bool)
    if thing_indices.shape != cluster_ids.shape:
        raise InconsistentInputError(
            f"{thing_indices.shape[0]} thing indices but {cluster_ids.shape[0]} cluster ids")
    instance = np.zeros(semantic.shape[0], dtype=np.int64)
    if thing_indices.size:
        if not thing_mask[semantic[thing_indices]].all():
            raise InconsistentInputError("a listed thing index has a stuff class")
        _, first_pos, inverse = np.unique(cluster_ids, return_index=True, return_inverse=True)
        rank = np.empty(first_pos.shape[0], dtype=np.int64)
        rank[np.argsort(first_pos, kind="stable")] = np.arange(1, first_pos.shape[0] + 1)
        instance[thing_indices] = rank[inverse]
    return PanopticLabels(semantic=semantic.copy(), instance=instance)
