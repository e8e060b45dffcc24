"""Toolkit configuration: dataset profiles, label-space location, loss and
clustering parameters.  Loading is strict: unknown keys are rejected and
referenced files must exist.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .dataspace import DatasetProfile
from .errors import ConfigError
from .labelspace import LabelSpace, PromptRegistry, load_label_space

try:
    import tomllib
except ModuleNotFoundError:           # Python < 3.11
    import tomli as tomllib

ENV_CONFIG = "LIDARMERGE_CONFIG"


@dataclass
class ClusterDefaults:
    max_iterations: int = 300
    shift_tolerance: float = 1e-3
    min_cluster_size: int = 1
    mode_merge_radius: float | None = None


@dataclass
class ToolConfig:
    profiles: dict[str, DatasetProfile]
    bandwidths: dict[str, float]
    label_space_path: Path
    tau: float = 0.07
    norm_epsilon: float = 1e-12
    normalize_embeddings: bool = True
    normalize_epsilon: float = 1e-5
    batch_stats: bool = False
    histogram_bin_width: float = 0.5
    histogram_max_range: float = 50.0
    cluster: ClusterDefaults = field(default_factory=ClusterDefaults)

    def load_label_space(self) -> tuple[LabelSpace, PromptRegistry]:
        return load_label_space(self.label_space_path)


def default_config_path() -> Path:
    return Path(str(resources.files("lidarmerge").joinpath("data/default_config.toml")))


def resolve_config_path(explicit: str | Path | None = None) -> Path:
    """Explicit path, else $LIDARMERGE_CONFIG, else the packaged default."""
    if explicit is not None:
        return Path(explicit)
    env = os.environ.get(ENV_CONFIG)
    if env:
        return Path(env)
    return default_config_path()


def _reject_unknown(table: dict, allowed: set[str], where: str) -> None:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def load_tool_config(path: str | Path | None = None) -> ToolConfig:
    path = resolve_config_path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)

    _reject_unknown(raw, {"label_space", "profile", "losses", "normalize",
                          "histogram", "cluster"}, str(path))
    if "label_space" not in raw:
        raise ConfigError(f"{path}: missing 'label_space' entry")
    label_space_path = Path(raw["label_space"])
    if not label_space_path.is_absolute():
        label_space_path = path.parent / label_space_path
    if not label_space_path.is_file():
        raise ConfigError(f"label-space file not found: {label_space_path}")
    space, _ = load_label_space(label_space_path)

    profiles: dict[str, DatasetProfile] = {}
    bandwidths: dict[str, float] = {}
    for dataset_id, entry in raw.get("profile", {}).items():
        _reject_unknown(entry, {"voxel_size", "origin_offset", "bandwidth"},
                        f"profile.{dataset_id}")
        classes = space.classes_by_dataset.get(dataset_id, [])
        profiles[dataset_id] = DatasetProfile(
            dataset_id=dataset_id,
            origin_offset=entry.get("origin_offset", [0.0, 0.0, 0.0]),
            voxel_size=entry.get("voxel_size", [0.05, 0.05, 0.05]),
            class_count=len(classes),
        )
        if "bandwidth" in entry:
            bandwidth = float(entry["bandwidth"])
            if bandwidth <= 0:
                raise ConfigError(f"profile.{dataset_id}: bandwidth must be positive")
            bandwidths[dataset_id] = bandwidth

    cfg = ToolConfig(profiles=profiles, bandwidths=bandwidths,
                     label_space_path=label_space_path)

    loss_tbl = raw.get("losses", {})
    _reject_unknown(loss_tbl, {"tau", "norm_epsilon", "normalize_embeddings"}, "losses")
    cfg.tau = float(loss_tbl.get("tau", cfg.tau))
    cfg.norm_epsilon = float(loss_tbl.get("norm_epsilon", cfg.norm_epsilon))
    cfg.normalize_embeddings = bool(loss_tbl.get("normalize_embeddings",
                                                 cfg.normalize_embeddings))
    if cfg.tau <= 0:
        raise ConfigError("losses.tau must be positive")

    norm_tbl = raw.get("normalize", {})
    _reject_unknown(norm_tbl, {"epsilon", "batch_stats"}, "normalize")
    cfg.normalize_epsilon = float(norm_tbl.get("epsilon", cfg.normalize_epsilon))
    cfg.batch_stats = bool(norm_tbl.get("batch_stats", cfg.batch_stats))

    hist_tbl = raw.get("histogram", {})
    _reject_unknown(hist_tbl, {"bin_width", "max_range"}, "histogram")
    cfg.histogram_bin_width = float(hist_tbl.get("bin_width", cfg.histogram_bin_width))
    cfg.histogram_max_range = float(hist_tbl.get("max_range", cfg.histogram_max_range))

    cluster_tbl = raw.get("cluster", {})
    _reject_unknown(cluster_tbl, {"max_iterations", "shift_tolerance",
                                  "min_cluster_size", "mode_merge_radius"}, "cluster")
    cfg.cluster = ClusterDefaults(
        max_iterations=int(cluster_tbl.get("max_iterations", 300)),
        shift_tolerance=float(cluster_tbl.get("shift_tolerance", 1e-3)),
        min_cluster_size=int(cluster_tbl.get("min_cluster_size", 1)),
        mode_merge_radius=cluster_tbl.get("mode_merge_radius"),
    )
    return cfg


def default_label_space_path() -> Path:
    return Path(str(resources.files("lidarmerge").joinpath("data/labelspace_default.toml")))
