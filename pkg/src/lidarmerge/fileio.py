"""Bit-exact readers and writers for dataset files and the tensor format.

All readers reject trailing bytes; all writers produce files their readers
round-trip exactly.  Byte offsets in error messages point at the first
offending byte.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InconsistentInputError, InvalidInputError, MalformedFileError
from .geometry import PointCloud

log = logging.getLogger(__name__)

TENSOR_MAGIC = b"LMTF"
TENSOR_VERSION = 1
TENSOR_DTYPE_F32 = 0
TENSOR_MAX_RANK = 4


@dataclass
class ScanRecord:
    """One scan as loaded from disk: cloud, provenance, optional labels."""

    cloud: PointCloud
    dataset_id: str
    scan_id: str
    label_words: np.ndarray | None = None     # packed semantic/instance words


def read_scan(cloud_path: str | Path, dataset_id: str, scan_id: str | None = None,
              label_path: str | Path | None = None, fmt: str = "kitti") -> ScanRecord:
    """Load a scan (and its labels, when given) into one record."""
    if fmt == "kitti":
        cloud = read_kitti_bin(cloud_path)
    elif fmt == "nuscenes":
        cloud = read_nuscenes_bin(cloud_path)
    else:
        raise InvalidInputError(f"unknown cloud format {fmt!r}")
    words = None
    if label_path is not None:
        semantic, instance = read_kitti_label(label_path)
        if semantic.shape[0] != len(cloud):
            raise InconsistentInputError(
                f"{label_path} holds {semantic.shape[0]} labels for {len(cloud)} points")
        cloud.semantic = semantic
        cloud.instance = instance
        words = (semantic.astype(np.uint32) | (instance.astype(np.uint32) << 16)) \
            .astype(np.int64)
    return ScanRecord(cloud=cloud, dataset_id=dataset_id,
                      scan_id=Path(cloud_path).stem if scan_id is None else scan_id,
                      label_words=words)


def read_kitti_bin(path: str | Path) -> PointCloud:
    """Read little-endian float32 (x, y, z, intensity) records."""
    data = Path(path).read_bytes()
    if len(data) % 16:
        raise MalformedFileError(
            f"{path}: length {len(data)} is not a multiple of 16",
            offset=len(data) - len(data) % 16)
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(float)
    return PointCloud(coords=arr[:, :3], intensity=arr[:, 3])


def write_kitti_bin(cloud: PointCloud, path: str | Path) -> None:
    arr = np.empty((len(cloud), 4), dtype="<f4")
    arr[:, :3] = cloud.coords
    arr[:, 3] = 0.0 if cloud.intensity is None else cloud.intensity
    Path(path).write_bytes(arr.tobytes())


def read_kitti_label(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Split packed 32-bit label words into (semantic, instance).

    The low 16 bits hold the semantic id, the high 16 bits the instance id.
    """
    data = Path(path).read_bytes()
    if len(data) % 4:
        raise MalformedFileError(
            f"{path}: length {len(data)} is not a multiple of 4",
            offset=len(data) - len(data) % 4)
    words = np.frombuffer(data, dtype="<u4")
    semantic = (words & 0xFFFF).astype(np.int64)
    instance = (words >> 16).astype(np.int64)
    return semantic, instance


def write_kitti_label(semantic: np.ndarray, instance: np.ndarray, path: str | Path) -> None:
    semantic = np.asarray(semantic, dtype=np.int64)
    instance = np.asarray(instance, dtype=np.int64)
    if semantic.shape != instance.shape:
        raise InvalidInputError("semantic and instance must have equal length")
    for name, arr in (("semantic", semantic), ("instance", instance)):
        if arr.size and ((arr < 0).any() or (arr > 0xFFFF).any()):
            raise InvalidInputError(f"{name} ids must fit in 16 bits")
    words = (semantic.astype(np.uint32) | (instance.astype(np.uint32) << 16)).astype("<u4")
    Path(path).write_bytes(words.tobytes())


def read_nuscenes_bin(path: str | Path) -> PointCloud:
    """Read little-endian float32 (x, y, z, intensity, ring) records.

    The ring index is not part of the cloud model and is dropped.
    """
    data = Path(path).read_bytes()
    if len(data) % 20:
        raise MalformedFileError(
            f"{path}: length {len(data)} is not a multiple of 20",
            offset=len(data) - len(data) % 20)
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 5).astype(float)
    if arr.shape[0]:
        log.debug("%s: discarding ring index channel of %d records", path, arr.shape[0])
    return PointCloud(coords=arr[:, :3], intensity=arr[:, 3])


def write_nuscenes_bin(cloud: PointCloud, path: str | Path,
                       ring: np.ndarray | None = None) -> None:
    arr = np.zeros((len(cloud), 5), dtype="<f4")
    arr[:, :3] = cloud.coords
    if cloud.intensity is not None:
        arr[:, 3] = cloud.intensity
    if ring is not None:
        arr[:, 4] = ring
    Path(path).write_bytes(arr.tobytes())


def write_tensor_file(array: np.ndarray, path: str | Path) -> None:
    """Write a float32 tensor: magic, version u16, dtype u8, rank u8, dims u64."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim < 1 or arr.ndim > TENSOR_MAX_RANK:
        raise InvalidInputError(f"tensor rank must be 1..{TENSOR_MAX_RANK}, got {arr.ndim}")
    header = TENSOR_MAGIC + struct.pack("<HBB", TENSOR_VERSION, TENSOR_DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_tensor_file(path: str | Path) -> np.ndarray:
    """Read a tensor file back as float32, validating every header field."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise MalformedFileError(f"{path}: header truncated", offset=len(data))
    if data[:4] != TENSOR_MAGIC:
        raise MalformedFileError(f"{path}: bad magic {data[:4]!r}", offset=0)
    version, dtype_tag, rank = struct.unpack_from("<HBB", data, 4)
    if version != TENSOR_VERSION:
        raise MalformedFileError(f"{path}: unsupported version {version}", offset=4)
    if dtype_tag != TENSOR_DTYPE_F32:
        raise MalformedFileError(f"{path}: unsupported dtype tag {dtype_tag}", offset=6)
    if not 1 <= rank <= TENSOR_MAX_RANK:
        raise MalformedFileError(f"{path}: unsupported rank {rank}", offset=7)
    dims_end = 8 + 8 * rank
    if len(data) < dims_end:
        raise MalformedFileError(f"{path}: dimension list truncated", offset=len(data))
    dims = struct.unpack_from(f"<{rank}Q", data, 8)
    payload = int(np.prod(dims, dtype=np.int64)) * 4
    expected = dims_end + payload
    if len(data) < expected:
        raise MalformedFileError(f"{path}: payload truncated", offset=len(data))
    if len(data) > expected:
        raise MalformedFileError(f"{path}: trailing bytes after payload", offset=expected)
    return np.frombuffer(data, dtype="<f4", offset=dims_end).reshape(dims).copy()


def read_robustness_csv(path: str | Path) -> tuple[dict[tuple[str, int], float], float | None]:
    """Parse a robustness table: header ``corruption,severity,miou`` plus an
    optional ``clean,<miou>`` row.  Returns entry map and clean mIoU."""
    entries: dict[tuple[str, int], float] = {}
    clean = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["corruption", "severity", "miou"]:
            raise MalformedFileError(f"{path}: expected header 'corruption,severity,miou'")
        for lineno, row in enumerate(reader, start=2):
            row = [field.strip() for field in row if field.strip() != ""]
            if not row:
                continue
            if row[0] == "clean":
                if len(row) != 2:
                    raise MalformedFileError(f"{path}:{lineno}: clean row must be 'clean,<miou>'")
                clean = float(row[1])
                continue
            if len(row) != 3:
                raise MalformedFileError(f"{path}:{lineno}: expected corruption,severity,miou")
            key = (row[0], int(row[1]))
            if key in entries:
                raise MalformedFileError(f"{path}:{lineno}: duplicate entry for {key}")
            entries[key] = float(row[2])
    return entries, clean
