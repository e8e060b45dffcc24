"""Alignment and segmentation loss kernels with analytic gradients.

All kernels are pure functions over dense numpy arrays.  Reductions use
numpy's pairwise summation, and every softmax/log-sum-exp is stabilized by
max subtraction.  Gradients are exact (subgradients at kinks), so they can
be checked against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import (
    DegenerateRowError,
    EmptyTargetError,
    InvalidInputError,
    InvalidLabelError,
    InvalidProbabilityError,
    LayerChainError,
    ParameterError,
)

NORM_EPSILON = 1e-12
"""Row norms at or below this are treated as degenerate (no direction)."""

DEFAULT_TAU = 0.07
"""Default contrastive temperature (not published; exposed in config)."""


@dataclass
class LossResult:
    """Scalar loss value plus gradients w.r.t. each differentiable input."""

    value: float
    gradients: dict[str, np.ndarray] = field(default_factory=dict)
    components: dict[str, float] = field(default_factory=dict)


def _as_matrix(name: str, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] < 1:
        raise InvalidInputError(f"{name} must be a 2-D matrix, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise InvalidInputError(f"{name} contains non-finite entries")
    return x


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _logsumexp(x: np.ndarray) -> float:
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


# ---------------------------------------------------------------------------
# cosine alignment (shared kernel of the image-to-point and logit alignments)


def cosine_alignment_loss(a, b, norm_epsilon: float = NORM_EPSILON) -> LossResult:
    """Mean over rows of ``1 - cos(a_i, b_i)``, with gradients for both sides.

    Each per-row term lies in [0, 2].  Rows with norm <= ``norm_epsilon``
    have no direction and raise instead of being silently clamped.
    """
    a = _as_matrix("a", a)
    b = _as_matrix("b", b)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    m = a.shape[0]
    if m == 0:
        return LossResult(0.0, {"a": np.zeros_like(a), "b": np.zeros_like(b)})

    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if (na <= norm_epsilon).any() or (nb <= norm_epsilon).any():
        raise DegenerateRowError("zero-norm row in cosine alignment input")

    dots = (a * b).sum(axis=1)
    cos = dots / (na * nb)
    value = float(np.mean(1.0 - cos))

    # d cos_i / d a_i = b_i / (|a_i||b_i|) - cos_i * a_i / |a_i|^2
    ga = -(b / (na * nb)[:, None] - (cos / na ** 2)[:, None] * a) / m
    gb = -(a / (na * nb)[:, None] - (cos / nb ** 2)[:, None] * b) / m
    return LossResult(value, {"a": ga, "b": gb})


# ---------------------------------------------------------------------------
# domain-aware fusion forward pass


_ACTIVATIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "none": lambda x: x,
    "relu": lambda x: np.maximum(x, 0.0),
    "sigmoid": lambda x: 1.0 / (1.0 + np.exp(-x)),
    "softmax": lambda x: _softmax(x, axis=0),
}


@dataclass
class AffineLayer:
    """One dense layer ``act(W x + b)`` applied along the channel axis."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "none"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise InvalidInputError(
                f"layer needs (out, in) weights and (out,) bias, got "
                f"{self.weights.shape} / {self.bias.shape}")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise InvalidInputError("layer parameters contain non-finite entries")
        if self.activation not in _ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.weights.shape[1]:
            raise LayerChainError(
                f"layer expects {self.weights.shape[1]} input channels, got {x.shape[0]}")
        y = self.weights @ x
        y += self.bias if y.ndim == 1 else self.bias[:, None]
        return _ACTIVATIONS[self.activation](y)


def _apply_layers(layers, x: np.ndarray) -> np.ndarray:
    for layer in layers:
        x = layer(x)
    return x


def domain_fusion_forward(features: np.ndarray,
                          branch1: list[AffineLayer],
                          branch2: list[AffineLayer],
                          head: list[AffineLayer]) -> np.ndarray:
    """Fuse channel-concatenated image features with a gated excitation.

    ``features`` is (c_v, h, w).  Both branches run on the global average
    pooled channel vector; branch2 must end in a softmax.  Their product is
    a per-channel modulation that gates the input through a sigmoid, the
    gated map is added back to the input, and the head maps each spatial
    position to the output channel count.
    """
    features = np.asarray(features, dtype=float)
    if features.ndim != 3:
        raise InvalidInputError(f"features must be (channels, h, w), got {features.shape}")
    if not np.isfinite(features).all():
        raise InvalidInputError("features contain non-finite entries")
    if not branch2 or branch2[-1].activation != "softmax":
        raise LayerChainError("branch2 must end in a softmax activation")

    c_v, h, w = features.shape
    pooled = features.mean(axis=(1, 2))
    excite = _apply_layers(branch1, pooled)
    select = _apply_layers(branch2, pooled)
    if excite.shape != select.shape or excite.shape != (c_v,):
        raise LayerChainError(
            f"branch outputs must both be ({c_v},), got {excite.shape} and {select.shape}")
    modulation = excite * select

    gate = _ACTIVATIONS["sigmoid"](modulation)
    mixed = gate[:, None, None] * features + features
    out = _apply_layers(head, mixed.reshape(c_v, h * w))
    return out.reshape(out.shape[0], h, w)


# ---------------------------------------------------------------------------
# text-driven contrastive alignment


def text_contrastive_loss(items, text, item_class, negative_mask, tau: float = DEFAULT_TAU,
                          normalize: bool = True,
                          norm_epsilon: float = NORM_EPSILON) -> LossResult:
    """Per-class contrastive pull of items toward their class text embedding.

    For every class with members, the numerator sums exponentiated
    similarities of that class's items to its own text embedding; the
    denominator additionally sums, for those same items, their similarities
    to every other class embedding permitted by ``negative_mask`` (negatives
    stay confined to the querying dataset's category space).  The value is
    the mean of ``-log(num/den)`` over classes with members, which tends to
    zero as the temperature shrinks on well-separated data.  Text embeddings
    are frozen; gradients are returned for the items only.  ``normalize``
    projects both sides to unit norm before the scalar products (the common
    reading; both modes are exposed).
    """
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    items = _as_matrix("items", items)
    text = _as_matrix("text", text)
    if items.shape[1] != text.shape[1]:
        raise InvalidInputError(
            f"items have {items.shape[1]} channels, text has {text.shape[1]}")
    item_class = np.asarray(item_class, dtype=np.int64)
    negative_mask = np.asarray(negative_mask, dtype=bool)
    q_count = text.shape[0]
    if negative_mask.shape != (q_count,):
        raise InvalidInputError("negative_mask length must equal the text row count")
    m = items.shape[0]
    if item_class.shape != (m,):
        raise InvalidInputError("item_class length must equal the item row count")
    if m == 0:
        return LossResult(0.0, {"items": np.zeros_like(items)})
    if (item_class < 0).any() or (item_class >= q_count).any():
        raise InvalidLabelError("item_class contains ids outside the text class space")
    if not negative_mask[item_class].all():
        raise ParameterError("an item's class is not permitted by negative_mask")

    if normalize:
        r_items = np.linalg.norm(items, axis=1)
        r_text = np.linalg.norm(text, axis=1)
        if (r_items <= norm_epsilon).any():
            raise DegenerateRowError("zero-norm item row")
        if (r_text[negative_mask] <= norm_epsilon).any():
            raise DegenerateRowError("zero-norm text row")
        it = items / r_items[:, None]
        tx = np.where((r_text > norm_epsilon)[:, None], text / np.maximum(r_text, norm_epsilon)[:, None], 0.0)
    else:
        it = items
        tx = text

    sims = (tx @ it.T) / tau                      # (Q, m)
    present = np.unique(item_class)
    classes_in = np.flatnonzero(negative_mask)    # own class is permitted by pre
    grad_sims = np.zeros_like(sims)
    value = 0.0
    for q in present:
        own = np.flatnonzero(item_class == q)
        sub = sims[np.ix_(classes_in, own)]
        log_num = _logsumexp(sims[q, own])
        log_den = _logsumexp(sub)
        value += log_den - log_num
        grad_sims[np.ix_(classes_in, own)] += np.exp(sub - log_den)
        grad_sims[q, own] -= np.exp(sims[q, own] - log_num)

    n_present = len(present)
    value /= n_present
    grad_sims /= n_present

    if normalize:
        # chain through the item normalization; text is frozen
        lin = grad_sims.T @ tx                                   # (m, c)
        along = (grad_sims * (sims * tau)).sum(axis=0)           # sum_k g * <t_k, x_j>
        grad_items = (lin - along[:, None] * it) / (tau * r_items[:, None])
    else:
        grad_items = (grad_sims.T @ tx) / tau
    return LossResult(float(value), {"items": grad_items})


def label_alignment_loss(point_logits, pixel_logits, point_feats, pixel_feats,
                         text, classes, mask, tau: float = DEFAULT_TAU,
                         normalize: bool = True) -> LossResult:
    """Combined label-space alignment: point-to-text + image-to-point + image-to-text.

    The image-to-point term is the cosine alignment of paired pixel and
    point logits; the two text terms are the contrastive kernel on point
    and pixel features.  Components are reported individually and sum (in
    that order) to the value.
    """
    p2t = text_contrastive_loss(point_feats, text, classes, mask, tau, normalize)
    v2t = text_contrastive_loss(pixel_feats, text, classes, mask, tau, normalize)
    i2p = cosine_alignment_loss(pixel_logits, point_logits)
    value = p2t.value + i2p.value + v2t.value
    return LossResult(
        value,
        gradients={
            "point_feats": p2t.gradients["items"],
            "pixel_feats": v2t.gradients["items"],
            "pixel_logits": i2p.gradients["a"],
            "point_logits": i2p.gradients["b"],
        },
        components={
            "point_to_text": p2t.value,
            "image_to_point": i2p.value,
            "image_to_text": v2t.value,
        },
    )


# ---------------------------------------------------------------------------
# segmentation losses


def cross_entropy_loss(logits, targets, ignore_id: int) -> LossResult:
    """Mean negative log-softmax over non-ignored rows (max-stabilized)."""
    logits = _as_matrix("logits", logits)
    targets = np.asarray(targets, dtype=np.int64)
    n, q_count = logits.shape
    if targets.shape != (n,):
        raise InvalidInputError("targets length must equal the logit row count")
    valid = targets != ignore_id
    if not valid.any():
        raise EmptyTargetError("every target row is ignored")
    t = targets[valid]
    if (t < 0).any() or (t >= q_count).any():
        raise InvalidLabelError("target id outside [0, Q)")

    z = logits[valid]
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    log_den = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    nll = log_den - shifted[rows, t]
    value = float(nll.mean())

    grad = np.zeros_like(logits)
    soft = _softmax(z, axis=1)
    soft[rows, t] -= 1.0
    grad[valid] = soft / z.shape[0]
    return LossResult(value, {"logits": grad})


def lovasz_softmax_loss(probs, targets, ignore_id: int,
                        row_sum_tolerance: float = 1e-6) -> LossResult:
    """Lovász extension of the Jaccard index over sorted per-point errors.

    ``probs`` rows must be probability vectors (validated to
    ``row_sum_tolerance``).  Per class present in the non-ignored targets,
    errors are ``1 - p`` on that class's points and ``p`` elsewhere; the
    loss is the scalar product of the descending-sorted errors with the
    Jaccard extension gradient, averaged over present classes.  At 0/1
    vertex inputs this equals ``1 - IoU`` exactly.  The returned gradient
    treats the sort permutation as locally constant (a subgradient at ties).
    """
    probs = _as_matrix("probs", probs)
    targets = np.asarray(targets, dtype=np.int64)
    n, q_count = probs.shape
    if targets.shape != (n,):
        raise InvalidInputError("targets length must equal the probability row count")
    sums = probs.sum(axis=1)
    if (np.abs(sums - 1.0) > row_sum_tolerance).any() or (probs < -row_sum_tolerance).any():
        raise InvalidProbabilityError("rows are not normalized probability vectors")

    grad = np.zeros_like(probs)
    valid = targets != ignore_id
    if not valid.any():
        return LossResult(0.0, {"probs": grad})
    t = targets[valid]
    if (t < 0).any() or (t >= q_count).any():
        raise InvalidLabelError("target id outside [0, Q)")
    v = probs[valid]

    present = np.unique(t)
    value = 0.0
    grad_valid = np.zeros_like(v)
    for c in present:
        fg = (t == c).astype(float)
        errors = np.where(fg > 0, 1.0 - v[:, c], v[:, c])
        order = np.argsort(-errors, kind="stable")
        err_sorted = errors[order]
        fg_sorted = fg[order]

        gt_total = fg.sum()
        intersection = gt_total - np.cumsum(fg_sorted)
        union = gt_total + np.cumsum(1.0 - fg_sorted)
        jaccard = 1.0 - intersection / union
        ext_grad = jaccard.copy()
        ext_grad[1:] = jaccard[1:] - jaccard[:-1]

        value += float(err_sorted @ ext_grad)
        per_point = np.empty_like(ext_grad)
        per_point[order] = ext_grad
        grad_valid[:, c] += np.where(fg > 0, -1.0, 1.0) * per_point

    n_present = len(present)
    value /= n_present
    grad[valid] = grad_valid / n_present
    return LossResult(value, {"probs": grad})


def l1_offset_loss(pred_offsets, target_offsets, thing_mask) -> LossResult:
    """Mean absolute offset error over instance-bearing rows.

    The subgradient at exact zeros is 0.  An empty mask yields a zero loss
    with zero gradients.
    """
    pred = _as_matrix("pred_offsets", pred_offsets)
    target = _as_matrix("target_offsets", target_offsets)
    if pred.shape != target.shape:
        raise InvalidInputError(f"shape mismatch: {pred.shape} vs {target.shape}")
    mask = np.asarray(thing_mask, dtype=bool)
    if mask.shape != (pred.shape[0],):
        raise InvalidInputError("thing_mask length must equal the row count")

    grad = np.zeros_like(pred)
    n_masked = int(mask.sum())
    if n_masked == 0:
        return LossResult(0.0, {"pred_offsets": grad})
    diff = pred[mask] - target[mask]
    denom = n_masked * pred.shape[1]
    value = float(np.abs(diff).sum() / denom)
    grad[mask] = np.sign(diff) / denom
    return LossResult(value, {"pred_offsets": grad})


def total_objective(parts: Mapping[str, float]) -> LossResult:
    """Unweighted sum of named loss terms, with the breakdown echoed back."""
    clean = {}
    for name, part in parts.items():
        part = float(part)
        if not math.isfinite(part):
            raise InvalidInputError(f"loss part {name!r} is non-finite")
        clean[name] = part
    return LossResult(math.fsum(clean.values()), components=clean)


# ---------------------------------------------------------------------------
# numerical verification support


def central_difference_gradient(func: Callable[[np.ndarray], float], x: np.ndarray,
                                h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function, entry by entry."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        f_plus = func(x)
        xf[i] = orig - h
        f_minus = func(x)
        xf[i] = orig
        flat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad
