"""Unified label space across datasets, per-dataset remap tables, and the
text-prompt registry consumed by the label-alignment losses.

The cross-dataset merge table is explicit configuration (see
``data/labelspace_default.toml``), never inferred at runtime, so the union
space is reproducible and auditable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    ConflictingSynonymError,
    InvalidLabelError,
    UnknownDatasetError,
)

try:
    import tomllib
except ModuleNotFoundError:           # Python < 3.11
    import tomli as tomllib

UNIFIED_IGNORE_ID = 65535
"""Default unified ignore id; chosen to fit a 16-bit packed label word."""


@dataclass
class LabelSpace:
    """Union class space over several datasets with per-dataset remap tables."""

    dataset_ids: list[str]
    classes_by_dataset: dict[str, list[str]]
    ignore_by_dataset: dict[str, int]
    unified_names: list[str]
    remap_by_dataset: dict[str, np.ndarray]   # dataset class id -> unified id
    thing_mask: np.ndarray                    # (Q,) bool
    ignore_id: int = UNIFIED_IGNORE_ID

    @property
    def num_unified(self) -> int:
        return len(self.unified_names)

    def unified_id(self, name: str) -> int:
        try:
            return self.unified_names.index(name)
        except ValueError:
            raise InvalidLabelError(f"unknown unified class {name!r}") from None


def build_unified_space(datasets: dict[str, list[str]],
                        synonyms=None,
                        things: dict[str, list[str]] | None = None,
                        ignore_ids: dict[str, int] | None = None,
                        ignore_id: int = UNIFIED_IGNORE_ID) -> LabelSpace:
    """Merge per-dataset class lists into one unified space.

    ``synonyms`` lists groups of ``(dataset_id, class_name)`` members that
    share one unified class; a mapping ``{group_name: members}`` also works
    and then names the unified class.  Classes outside any group get fresh
    unified ids.  Unified order is first appearance across datasets in the
    given order.
    """
    for dataset_id, classes in datasets.items():
        if len(set(classes)) != len(classes):
            raise ConfigError(f"duplicate class names within dataset {dataset_id!r}")

    if synonyms is None:
        synonyms = []
    if isinstance(synonyms, dict):
        groups = [(name, [tuple(m) for m in members]) for name, members in synonyms.items()]
    else:
        groups = [(None, [tuple(m) for m in members]) for members in synonyms]

    member_to_group: dict[tuple[str, str], int] = {}
    for gi, (_, members) in enumerate(groups):
        for member in members:
            if member in member_to_group:
                raise ConflictingSynonymError(
                    f"class {member[1]!r} of dataset {member[0]!r} is in two synonym groups")
            dataset_id, class_name = member
            if dataset_id not in datasets or class_name not in datasets[dataset_id]:
                raise ConfigError(f"synonym member {member!r} is not a known dataset class")
            member_to_group[member] = gi

    unified_names: list[str] = []
    group_unified: dict[int, int] = {}
    remap: dict[str, np.ndarray] = {}
    member_of: list[list[tuple[str, str]]] = []

    def fresh_name(preferred: str, dataset_id: str) -> str:
        if preferred not in unified_names:
            return preferred
        return f"{dataset_id}/{preferred}"

    for dataset_id, classes in datasets.items():
        table = np.empty(len(classes), dtype=np.int64)
        for class_id, class_name in enumerate(classes):
            key = (dataset_id, class_name)
            if key in member_to_group:
                gi = member_to_group[key]
                if gi not in group_unified:
                    group_name = groups[gi][0] or class_name
                    group_unified[gi] = len(unified_names)
                    unified_names.append(fresh_name(group_name, dataset_id))
                    member_of.append([])
                uid = group_unified[gi]
            else:
                uid = len(unified_names)
                unified_names.append(fresh_name(class_name, dataset_id))
                member_of.append([])
            table[class_id] = uid
            member_of[uid].append(key)
        remap[dataset_id] = table

    thing_mask = np.zeros(len(unified_names), dtype=bool)
    if things:
        for dataset_id, thing_classes in things.items():
            if dataset_id not in datasets:
                raise UnknownDatasetError(f"things listed for unknown dataset {dataset_id!r}")
            for class_name in thing_classes:
                if class_name not in datasets[dataset_id]:
                    raise ConfigError(
                        f"thing class {class_name!r} is not in dataset {dataset_id!r}")
                class_id = datasets[dataset_id].index(class_name)
                thing_mask[remap[dataset_id][class_id]] = True

    ignore_by_dataset = dict(ignore_ids) if ignore_ids else {}
    for dataset_id in datasets:
        ignore_by_dataset.setdefault(dataset_id, ignore_id)

    return LabelSpace(
        dataset_ids=list(datasets),
        classes_by_dataset={k: list(v) for k, v in datasets.items()},
        ignore_by_dataset=ignore_by_dataset,
        unified_names=unified_names,
        remap_by_dataset=remap,
        thing_mask=thing_mask,
        ignore_id=ignore_id,
    )


def remap_labels(labels: np.ndarray, space: LabelSpace, dataset_id: str) -> np.ndarray:
    """Map per-point dataset class ids to unified ids (ignore passes through)."""
    if dataset_id not in space.remap_by_dataset:
        raise UnknownDatasetError(f"dataset {dataset_id!r} is not part of this label space")
    labels = np.asarray(labels, dtype=np.int64)
    table = space.remap_by_dataset[dataset_id]
    n_classes = table.shape[0]
    dataset_ignore = space.ignore_by_dataset[dataset_id]

    is_ignore = labels == dataset_ignore
    in_range = (labels >= 0) & (labels < n_classes)
    bad = ~(is_ignore | in_range)
    if bad.any():
        raise InvalidLabelError(
            f"label {int(labels[bad][0])} outside dataset {dataset_id!r} "
            f"class range [0, {n_classes})")
    out = np.full(labels.shape, space.ignore_id, dtype=np.int64)
    out[in_range] = table[labels[in_range]]
    out[is_ignore] = space.ignore_id
    return out


def dataset_negative_mask(space: LabelSpace, dataset_id: str) -> np.ndarray:
    """Boolean Q-vector: which unified classes this dataset can produce.

    The contrastive losses confine negative samples to the querying
    dataset's own category space via this mask.
    """
    if dataset_id not in space.remap_by_dataset:
        raise UnknownDatasetError(f"dataset {dataset_id!r} is not part of this label space")
    mask = np.zeros(space.num_unified, dtype=bool)
    mask[space.remap_by_dataset[dataset_id]] = True
    return mask


@dataclass
class PromptRegistry:
    """Text prompts per class, verbatim per dataset plus a unified view.

    The unified view is the deduplicated union of member prompts in
    first-seen order; ``unified_overrides`` pins specific unified classes to
    an explicit list instead.  Templates are applied only by :meth:`expand`;
    the stored strings stay verbatim.
    """

    space: LabelSpace
    per_dataset: dict[str, dict[str, list[str]]]
    templates: list[str] = field(default_factory=lambda: ["{}"])
    unified_overrides: dict[str, list[str]] = field(default_factory=dict)
    unified: list[list[str]] = field(default_factory=list)

    def __post_init__(self):
        if not self.unified:
            self.unified = [[] for _ in range(self.space.num_unified)]
            for dataset_id in self.space.dataset_ids:
                classes = self.space.classes_by_dataset[dataset_id]
                table = self.space.remap_by_dataset[dataset_id]
                prompts = self.per_dataset.get(dataset_id, {})
                for class_id, class_name in enumerate(classes):
                    for prompt in prompts.get(class_name, [class_name]):
                        bucket = self.unified[table[class_id]]
                        if prompt not in bucket:
                            bucket.append(prompt)
        for name, prompts in self.unified_overrides.items():
            self.unified[self.space.unified_id(name)] = list(prompts)
        for uid, bucket in enumerate(self.unified):
            if not bucket:
                raise ConfigError(
                    f"unified class {self.space.unified_names[uid]!r} has no prompts")

    def for_class(self, unified_id: int) -> list[str]:
        if not 0 <= unified_id < self.space.num_unified:
            raise InvalidLabelError(f"unknown unified class id {unified_id}")
        return list(self.unified[unified_id])

    def for_dataset(self, dataset_id: str) -> dict[str, list[str]]:
        """The verbatim per-class prompt table of one dataset."""
        if dataset_id not in self.space.dataset_ids:
            raise UnknownDatasetError(f"dataset {dataset_id!r} is not part of this label space")
        classes = self.space.classes_by_dataset[dataset_id]
        prompts = self.per_dataset.get(dataset_id, {})
        return {name: list(prompts.get(name, [name])) for name in classes}

    def expand(self, unified_id: int) -> list[str]:
        """Prompts with every template applied, ready for a text encoder."""
        return [t.format(p) for p in self.for_class(unified_id) for t in self.templates]


def prompts_for_class(registry: PromptRegistry, unified_id: int) -> list[str]:
    """Stored prompt strings for one unified class, verbatim."""
    return registry.for_class(unified_id)


def load_label_space(path: str | Path) -> tuple[LabelSpace, PromptRegistry]:
    """Load a label-space TOML file (datasets, synonyms, prompts, things)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"label-space file not found: {path}")
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)

    known = {"order", "ignore_id", "templates", "dataset", "synonyms", "prompts"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown label-space keys: {sorted(unknown)}")
    if "dataset" not in raw:
        raise ConfigError("label-space file has no [dataset.*] tables")

    order = raw.get("order", list(raw["dataset"]))
    datasets: dict[str, list[str]] = {}
    things: dict[str, list[str]] = {}
    ignore_ids: dict[str, int] = {}
    for dataset_id in order:
        if dataset_id not in raw["dataset"]:
            raise ConfigError(f"order lists unknown dataset {dataset_id!r}")
        entry = raw["dataset"][dataset_id]
        bad = set(entry) - {"classes", "ignore", "things"}
        if bad:
            raise ConfigError(f"unknown keys in dataset {dataset_id!r}: {sorted(bad)}")
        datasets[dataset_id] = list(entry["classes"])
        things[dataset_id] = list(entry.get("things", []))
        if "ignore" in entry:
            ignore_ids[dataset_id] = int(entry["ignore"])

    synonyms = {}
    for group_name, members in raw.get("synonyms", {}).items():
        parsed = []
        for member in members:
            dataset_id, _, class_name = member.partition("/")
            if not class_name:
                raise ConfigError(f"synonym member {member!r} is not 'dataset/class'")
            parsed.append((dataset_id, class_name))
        synonyms[group_name] = parsed

    space = build_unified_space(
        datasets, synonyms, things=things, ignore_ids=ignore_ids,
        ignore_id=int(raw.get("ignore_id", UNIFIED_IGNORE_ID)))

    # [prompts.<dataset>] sub-tables keep each dataset's appendix-style
    # prompt lists verbatim; a [prompts.<unified-class>] string array pins
    # that unified class directly.
    per_dataset: dict[str, dict[str, list[str]]] = {}
    overrides: dict[str, list[str]] = {}
    for key, value in raw.get("prompts", {}).items():
        if key in datasets:
            per_dataset[key] = {cls: list(ps) for cls, ps in value.items()}
        elif key in space.unified_names:
            overrides[key] = list(value)
        else:
            raise ConfigError(f"prompts key {key!r} is neither a dataset nor a unified class")
    registry = PromptRegistry(
        space=space,
        per_dataset=per_dataset,
        templates=list(raw.get("templates", ["{}"])),
        unified_overrides=overrides,
    )
    return space, registry
