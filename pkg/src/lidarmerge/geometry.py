"""Camera-calibrated projection of LiDAR points and point-pixel pairing.

The projection chain is the standard pinhole model on homogeneous
coordinates: a point ``(x, y, z, 1)`` is taken through the 4x4 extrinsic
rigid transform into the camera frame, then through the 3x4 intrinsic
matrix, and the result is divided by the camera-frame depth.  Points at or
behind the camera plane project to nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    InconsistentInputError,
    InvalidCalibrationError,
    InvalidInputError,
    MalformedFileError,
)

DEPTH_EPSILON = 1e-6
"""Minimum camera-frame depth (meters) for a point to count as visible."""

_ROTATION_TOL = 1e-6


@dataclass(frozen=True)
class CameraModel:
    """A calibrated pinhole camera.

    ``intrinsic`` is the 3x4 pixel projection matrix, ``extrinsic`` the 4x4
    world-to-camera rigid transform whose upper 3x3 block must be a rotation
    and whose bottom row must be (0, 0, 0, 1).
    """

    intrinsic: np.ndarray
    extrinsic: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        intr = np.asarray(self.intrinsic, dtype=float)
        extr = np.asarray(self.extrinsic, dtype=float)
        if intr.shape != (3, 4):
            raise InvalidCalibrationError(f"intrinsic must be 3x4, got {intr.shape}")
        if extr.shape != (4, 4):
            raise InvalidCalibrationError(f"extrinsic must be 4x4, got {extr.shape}")
        if not (np.isfinite(intr).all() and np.isfinite(extr).all()):
            raise InvalidCalibrationError("calibration matrices contain non-finite entries")
        rot = extr[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=_ROTATION_TOL):
            raise InvalidCalibrationError("extrinsic rotation block is not orthonormal")
        if not np.allclose(extr[3], [0.0, 0.0, 0.0, 1.0], atol=_ROTATION_TOL):
            raise InvalidCalibrationError("extrinsic bottom row must be (0, 0, 0, 1)")
        if self.width <= 0 or self.height <= 0:
            raise InvalidCalibrationError("image dimensions must be positive")
        object.__setattr__(self, "intrinsic", intr)
        object.__setattr__(self, "extrinsic", extr)


@dataclass
class PointCloud:
    """N LiDAR points with optional intensity and per-point labels."""

    coords: np.ndarray
    intensity: np.ndarray | None = None
    semantic: np.ndarray | None = None
    instance: np.ndarray | None = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise InvalidInputError(f"coords must be (N, 3), got {coords.shape}")
        if not np.isfinite(coords).all():
            raise InvalidInputError("coords contain non-finite values")
        self.coords = coords
        n = coords.shape[0]
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=float)
            if self.intensity.shape != (n,):
                raise InvalidInputError("intensity length does not match point count")
        for name in ("semantic", "instance"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=np.int64)
                if arr.shape != (n,):
                    raise InvalidInputError(f"{name} length does not match point count")
                setattr(self, name, arr)

    def __len__(self) -> int:
        return self.coords.shape[0]


@dataclass
class Projection:
    """Per-point projection result; entries with ``valid == False`` are NaN."""

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    valid: np.ndarray


@dataclass
class PointPixelPairs:
    """Point-to-pixel correspondences surviving depth and bounds culling."""

    point_indices: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    pixel_coords: np.ndarray = field(default_factory=lambda: np.empty((0, 2), np.int64))
    camera_indices: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    def __len__(self) -> int:
        return self.point_indices.shape[0]


def project_points(cloud: PointCloud, cam: CameraModel,
                   depth_epsilon: float = DEPTH_EPSILON) -> Projection:
    """Project every point of ``cloud`` through ``cam``.

    Returns continuous pixel coordinates and camera-frame depth in meters.
    Points with camera-frame depth <= ``depth_epsilon`` are marked invalid.
    """
    n = len(cloud)
    homo = np.empty((n, 4))
    homo[:, :3] = cloud.coords
    homo[:, 3] = 1.0
    cam_frame = homo @ cam.extrinsic.T           # (N, 4), camera coordinates
    pix = cam_frame @ cam.intrinsic.T            # (N, 3)
    depth = cam_frame[:, 2].copy()
    valid = depth > depth_epsilon

    u = np.full(n, np.nan)
    v = np.full(n, np.nan)
    np.divide(pix[:, 0], depth, out=u, where=valid)
    np.divide(pix[:, 1], depth, out=v, where=valid)
    depth_out = np.where(valid, depth, np.nan)
    return Projection(u=u, v=v, depth=depth_out, valid=valid)


def round_half_away_from_zero(x: np.ndarray) -> np.ndarray:
    """Round to the nearest integer, halves away from zero (not banker's)."""
    x = np.asarray(x, dtype=float)
    return np.copysign(np.floor(np.abs(x) + 0.5), x).astype(np.int64)


def pair_points_pixels(cloud: PointCloud, cams: list[CameraModel],
                       depth_epsilon: float = DEPTH_EPSILON) -> PointPixelPairs:
    """Build point-pixel pairs over one or more cameras.

    A pair survives when the projected depth is positive and the rounded
    pixel falls inside ``[0, W) x [0, H)``.  A point visible in several
    cameras keeps the pair with the smallest depth (ties go to the lowest
    camera index), so the result is deterministic.
    """
    if not cams:
        raise InvalidInputError("at least one camera is required")
    n = len(cloud)
    best_depth = np.full(n, np.inf)
    best_cam = np.full(n, -1, dtype=np.int64)
    best_uv = np.zeros((n, 2), dtype=np.int64)

    for cam_idx, cam in enumerate(cams):
        proj = project_points(cloud, cam, depth_epsilon=depth_epsilon)
        if not proj.valid.any():
            continue
        ui = round_half_away_from_zero(np.where(proj.valid, proj.u, 0.0))
        vi = round_half_away_from_zero(np.where(proj.valid, proj.v, 0.0))
        inside = (proj.valid
                  & (ui >= 0) & (ui < cam.width)
                  & (vi >= 0) & (vi < cam.height))
        better = inside & (proj.depth < best_depth)
        best_depth[better] = proj.depth[better]
        best_cam[better] = cam_idx
        best_uv[better, 0] = ui[better]
        best_uv[better, 1] = vi[better]

    keep = np.flatnonzero(best_cam >= 0)
    return PointPixelPairs(
        point_indices=keep.astype(np.int64),
        pixel_coords=best_uv[keep],
        camera_indices=best_cam[keep],
    )


def gather_paired_features(features: np.ndarray, pairs: PointPixelPairs,
                           source: str = "point",
                           image_size: tuple[int, int] | None = None) -> np.ndarray:
    """Select the feature row behind each pair.

    ``source="point"`` indexes rows by point index; ``source="pixel"``
    expects one row per pixel in row-major order and needs
    ``image_size=(width, height)`` to flatten ``(u, v)``.
    """
    features = np.asarray(features)
    if features.ndim != 2:
        raise InvalidInputError(f"features must be 2-D, got shape {features.shape}")
    if source == "point":
        rows = pairs.point_indices
    elif source == "pixel":
        if image_size is None:
            raise InvalidInputError("image_size is required for pixel-indexed features")
        width, height = image_size
        u = pairs.pixel_coords[:, 0]
        v = pairs.pixel_coords[:, 1]
        if len(pairs) and ((u < 0).any() or (u >= width).any()
                           or (v < 0).any() or (v >= height).any()):
            raise InconsistentInputError("pixel coordinates fall outside image_size")
        rows = v * width + u
    else:
        raise InvalidInputError(f"unknown source {source!r}")
    if len(pairs) and (rows.min() < 0 or rows.max() >= features.shape[0]):
        raise InconsistentInputError(
            f"pair indices exceed feature row count {features.shape[0]}")
    return features[rows]


def parse_calibration(path: str | Path) -> list[CameraModel]:
    """Parse a plain-text calibration file into cameras.

    The file holds labeled blocks of whitespace-separated numbers:
    ``intrinsic:`` (12 values, row-major 3x4), ``extrinsic:`` (16 values,
    row-major 4x4) and ``size:`` (width height).  A repeated label starts
    the next camera.
    """
    text = Path(path).read_text()
    expected = {"intrinsic": 12, "extrinsic": 16, "size": 2}
    blocks: list[dict[str, list[float]]] = []
    current: dict[str, list[float]] = {}
    label = None
    for token in text.replace(":", ": ").split():
        if token.endswith(":"):
            name = token[:-1]
            if name not in expected:
                raise MalformedFileError(f"unknown calibration label {name!r}")
            if name in current:
                blocks.append(current)
                current = {}
            current[name] = []
            label = name
        else:
            if label is None:
                raise MalformedFileError("calibration values before any label")
            try:
                current[label].append(float(token))
            except ValueError:
                raise MalformedFileError(f"bad number {token!r} in calibration") from None
    if current:
        blocks.append(current)

    cams = []
    for block in blocks:
        for name, count in expected.items():
            if name not in block:
                raise MalformedFileError(f"calibration block missing {name!r}")
            if len(block[name]) != count:
                raise MalformedFileError(
                    f"label {name!r} expects {count} values, got {len(block[name])}")
        width, height = block["size"]
        if width != int(width) or height != int(height):
            raise MalformedFileError("image size must be integral")
        cams.append(CameraModel(
            intrinsic=np.array(block["intrinsic"]).reshape(3, 4),
            extrinsic=np.array(block["extrinsic"]).reshape(4, 4),
            width=int(width),
            height=int(height),
        ))
    if not cams:
        raise MalformedFileError("calibration file holds no camera blocks")
    return cams
