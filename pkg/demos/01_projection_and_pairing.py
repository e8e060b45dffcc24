"""Project a synthetic LiDAR scan into a two-camera rig and pair points
with pixels.

Run:  python3 demos/01_projection_and_pairing.py
"""

import numpy as np

from lidarmerge import (
    CameraModel,
    PointCloud,
    gather_paired_features,
    pair_points_pixels,
    project_points,
)

rng = np.random.default_rng(1)

# A forward-looking and a backward-looking camera sharing one intrinsic.
intrinsic = np.array([[300.0, 0, 320, 0],
                      [0, 300.0, 240, 0],
                      [0, 0, 1.0, 0]])
flip = np.diag([1.0, -1.0, -1.0, 1.0])      # 180 degrees about x: looks down -z
front = CameraModel(intrinsic=intrinsic, extrinsic=np.eye(4), width=640, height=480)
back = CameraModel(intrinsic=intrinsic, extrinsic=flip, width=640, height=480)

# Points scattered ahead of and behind the rig.
coords = rng.normal(scale=2.0, size=(500, 3))
coords[:, 2] = rng.uniform(-15, 15, size=500)
cloud = PointCloud(coords=coords)

proj = project_points(cloud, front)
print(f"front camera sees {int(proj.valid.sum())} of {len(cloud)} points "
      f"(positive depth)")

pairs = pair_points_pixels(cloud, [front, back])
print(f"rig pairing kept {len(pairs)} point-pixel pairs")
for cam_idx in (0, 1):
    count = int((pairs.camera_indices == cam_idx).sum())
    print(f"  camera {cam_idx}: {count} pairs")

# Pull per-point features (here: the raw coordinates) through the pairing,
# exactly what the alignment losses consume as their paired point features.
paired_feats = gather_paired_features(cloud.coords, pairs, source="point")
print(f"gathered paired feature matrix: {paired_feats.shape[0]} x {paired_feats.shape[1]}")

# Every pair respects the image bounds by construction.
u, v = pairs.pixel_coords[:, 0], pairs.pixel_coords[:, 1]
assert ((u >= 0) & (u < 640) & (v >= 0) & (v < 480)).all()
print("all pairs inside [0, W) x [0, H)")
