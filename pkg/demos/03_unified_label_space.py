"""Walk the shipped three-dataset label space: union classes, remap tables,
dataset-confined negative masks, and the text-prompt registry.

Run:  python3 demos/03_unified_label_space.py
"""

import numpy as np

from lidarmerge import (
    dataset_negative_mask,
    default_label_space_path,
    load_label_space,
    prompts_for_class,
    remap_labels,
)

space, registry = load_label_space(default_label_space_path())

print(f"{len(space.dataset_ids)} datasets merge into {space.num_unified} unified classes:")
for ds in space.dataset_ids:
    print(f"  {ds}: {len(space.classes_by_dataset[ds])} classes")
print("unified:", ", ".join(space.unified_names))

# Remap a fake scan labeled in each dataset's own id space.
rng = np.random.default_rng(3)
for ds in space.dataset_ids:
    n_cls = len(space.classes_by_dataset[ds])
    labels = rng.integers(0, n_cls, size=10)
    unified = remap_labels(labels, space, ds)
    names = [space.unified_names[u] for u in unified]
    print(f"{ds} labels {labels.tolist()} -> {names[:4]} ...")

# Negative masks confine contrastive negatives to each dataset's own space.
for ds in space.dataset_ids:
    mask = dataset_negative_mask(space, ds)
    print(f"negative mask for {ds}: {int(mask.sum())} of {space.num_unified} "
          f"classes permitted")

# The prompt registry keeps the per-dataset tables verbatim and exposes a
# deduplicated unified view plus template expansion for a text encoder.
cv = space.unified_id("construction-vehicle")
print("construction-vehicle prompts:", prompts_for_class(registry, cv))
print("expanded for embedding:", registry.expand(cv)[:3], "...")
print("thing classes:", [space.unified_names[i]
                         for i in np.flatnonzero(space.thing_mask)])
