"""Exercise the alignment and segmentation loss kernels on synthetic
features, including a finite-difference check of the analytic gradients.

Run:  python3 demos/04_alignment_losses.py
"""

import numpy as np

from lidarmerge import (
    AffineLayer,
    central_difference_gradient,
    cosine_alignment_loss,
    cross_entropy_loss,
    domain_fusion_forward,
    l1_offset_loss,
    label_alignment_loss,
    lovasz_softmax_loss,
    text_contrastive_loss,
    total_objective,
)

rng = np.random.default_rng(4)
m, c, q = 32, 8, 5

# Paired "image" and "point" features that agree up to noise.
point_feats = rng.normal(size=(m, c))
image_feats = point_feats + 0.1 * rng.normal(size=(m, c))
cma = cosine_alignment_loss(image_feats, point_feats)
print(f"cross-modal cosine alignment: {cma.value:.4f} (0 = parallel, 2 = antipodal)")

# Text-driven contrastive pull with per-class dataset confinement.
text = rng.normal(size=(q, c))
classes = rng.integers(0, q, size=m)
mask = np.ones(q, dtype=bool)
for tau in (1.0, 0.1, 0.05):
    value = text_contrastive_loss(text[classes], text, classes, mask, tau=tau).value
    print(f"contrastive loss at tau={tau}: {value:.4f}")

# Channel-gated fusion of concatenated image features.
features = rng.normal(size=(c, 6, 4))
branch1 = [AffineLayer(rng.normal(size=(c, c)) * 0.2, np.zeros(c))]
branch2 = [AffineLayer(rng.normal(size=(c, c)) * 0.2, np.zeros(c), "softmax")]
head = [AffineLayer(rng.normal(size=(c, c)) * 0.2, np.zeros(c))]
fused = domain_fusion_forward(features, branch1, branch2, head)
print(f"fusion forward: {features.shape} -> {fused.shape}")

# Combined label-space objective and the segmentation losses.
logits = rng.normal(size=(m, q))
combo = label_alignment_loss(logits, logits + 0.05 * rng.normal(size=(m, q)),
                             point_feats, image_feats, text, classes, mask, tau=0.07)
print("label alignment components:",
      {k: round(v, 4) for k, v in combo.components.items()})

targets = rng.integers(0, q, size=m)
ce = cross_entropy_loss(logits, targets, ignore_id=-1)
probs = np.exp(logits - logits.max(axis=1, keepdims=True))
probs /= probs.sum(axis=1, keepdims=True)
lovasz = lovasz_softmax_loss(probs, targets, ignore_id=-1)
l1 = l1_offset_loss(rng.normal(size=(m, 3)), rng.normal(size=(m, 3)),
                    rng.random(m) < 0.5)
total = total_objective({"v2p": cma.value, "label": combo.value, "ce": ce.value,
                         "lovasz": lovasz.value, "l1": l1.value})
print(f"total objective {total.value:.4f} = sum of "
      f"{ {k: round(v, 4) for k, v in total.components.items()} }")

# Spot-check one analytic gradient against central differences.
fd = central_difference_gradient(
    lambda x: cross_entropy_loss(x, targets, ignore_id=-1).value, logits)
err = np.abs(fd - ce.gradients["logits"]).max()
print(f"cross-entropy gradient vs finite differences: max abs deviation {err:.2e}")
