"""Score a noisy prediction against ground truth with the full metric
stack: confusion/mIoU, the PQ family, and corruption robustness.

Run:  python3 demos/06_evaluation_metrics.py
"""

import numpy as np

from lidarmerge import (
    PanopticLabels,
    RobustnessTable,
    accumulate_confusion,
    panoptic_match,
    panoptic_scores,
    robustness_scores,
    semantic_scores,
)

rng = np.random.default_rng(6)
n, q = 5000, 6
thing_mask = np.array([False, True, True, False, True, False])
IGNORE = 255

# Ground truth with instances on thing classes, prediction with 12% label
# noise and occasionally split instances.
gt_sem = rng.integers(0, q, size=n)
gt_sem[rng.random(n) < 0.03] = IGNORE
gt_inst = np.where((gt_sem != IGNORE) & thing_mask[np.minimum(gt_sem, q - 1)],
                   rng.integers(1, 6, size=n), 0)

pred_sem = gt_sem.copy()
noise = (rng.random(n) < 0.12) & (gt_sem != IGNORE)
pred_sem[noise] = rng.integers(0, q, size=int(noise.sum()))
pred_sem[gt_sem == IGNORE] = rng.integers(0, q, size=int((gt_sem == IGNORE).sum()))
pred_inst = np.where(thing_mask[pred_sem], np.maximum(gt_inst, 1), 0)

cm = accumulate_confusion(gt_sem, pred_sem, q, IGNORE)
sem = semantic_scores(cm)
print(f"semantic: mIoU {sem.miou * 100:.2f}%, mAcc {sem.macc * 100:.2f}% "
      f"over {cm.total} evaluated points")
for c in range(q):
    if sem.present[c]:
        print(f"  class {c}: IoU {sem.per_class_iou[c] * 100:6.2f}%")

stats = panoptic_match(PanopticLabels(gt_sem, gt_inst),
                       PanopticLabels(pred_sem, pred_inst), q, IGNORE)
pan = panoptic_scores(stats, np.nan_to_num(sem.per_class_iou), thing_mask)
print(f"panoptic: PQ {pan.pq * 100:.2f}%  PQ† {pan.pq_dagger * 100:.2f}%  "
      f"SQ {pan.sq * 100:.2f}%  RQ {pan.rq * 100:.2f}%")
print(f"  things: PQ {pan.pq_things * 100:.2f}%   stuff: PQ {pan.pq_stuff * 100:.2f}%")

# Robustness bookkeeping over the eight corruption families.
corruptions = ["fog", "wet_ground", "snow", "motion_blur", "beam_missing",
               "crosstalk", "incomplete_echo", "cross_sensor"]
clean = 0.78
baseline = rng.uniform(0.35, 0.65, size=(8, 3))
candidate = np.clip(baseline + rng.uniform(0.0, 0.15, size=(8, 3)), 0, 0.95)
table = RobustnessTable(corruptions, candidate, baseline, clean)
rob = robustness_scores(table)
print(f"robustness: mCE {rob.mce:.2f}% (lower is better), "
      f"mRR {rob.mrr:.2f}% (higher is better)")
worst = int(np.argmax(rob.ce))
print(f"  hardest corruption for this candidate: {corruptions[worst]} "
      f"(CE {rob.ce[worst]:.2f}%)")
