import math

import numpy as np
import pytest

from lidarmerge.errors import (
    DegenerateRowError,
    EmptyTargetError,
    InvalidInputError,
    InvalidProbabilityError,
    LayerChainError,
    ParameterError,
)
from lidarmerge.losses import (
    AffineLayer,
    cosine_alignment_loss,
    cross_entropy_loss,
    domain_fusion_forward,
    l1_offset_loss,
    label_alignment_loss,
    lovasz_softmax_loss,
    text_contrastive_loss,
    total_objective,
)

from conftest import max_relative_error, numeric_gradient


def well_conditioned_rows(rng, shape, lo=0.5, hi=2.0):
    x = rng.normal(size=shape)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x * rng.uniform(lo, hi, size=(shape[0], 1))


# --- cosine alignment -------------------------------------------------------


def test_cosine_identical_rows_zero():
    rng = np.random.default_rng(50)
    a = well_conditioned_rows(rng, (6, 5))
    assert cosine_alignment_loss(a, a.copy()).value == pytest.approx(0.0, abs=1e-15)


def test_cosine_antipodal_rows_two():
    rng = np.random.default_rng(51)
    a = well_conditioned_rows(rng, (4, 3))
    assert cosine_alignment_loss(a, -a).value == pytest.approx(2.0, abs=1e-15)


def test_cosine_gradient_matches_finite_differences():
    rng = np.random.default_rng(52)
    a = well_conditioned_rows(rng, (8, 4))
    b = well_conditioned_rows(rng, (8, 4))
    res = cosine_alignment_loss(a, b)
    fd_a = numeric_gradient(lambda x: cosine_alignment_loss(x, b).value, a, h=1e-5)
    fd_b = numeric_gradient(lambda x: cosine_alignment_loss(a, x).value, b, h=1e-5)
    assert max_relative_error(fd_a, res.gradients["a"]) < 1e-4
    assert max_relative_error(fd_b, res.gradients["b"]) < 1e-4


def test_cosine_invariant_to_positive_row_rescaling():
    rng = np.random.default_rng(53)
    a = well_conditioned_rows(rng, (10, 6))
    b = well_conditioned_rows(rng, (10, 6))
    base = cosine_alignment_loss(a, b).value
    scales = rng.uniform(0.1, 9.0, size=(10, 1))
    assert abs(cosine_alignment_loss(a * scales, b).value - base) < 1e-9


def test_cosine_zero_row_raises():
    a = np.ones((2, 3))
    a[1] = 0.0
    with pytest.raises(DegenerateRowError):
        cosine_alignment_loss(a, np.ones((2, 3)))


def test_cosine_shape_mismatch():
    with pytest.raises(InvalidInputError):
        cosine_alignment_loss(np.ones((2, 3)), np.ones((3, 3)))


# --- domain fusion forward --------------------------------------------------


def identity_head(c):
    return [AffineLayer(np.eye(c), np.zeros(c))]


def softmax_branch(rng, c):
    return [AffineLayer(rng.normal(size=(c, c)), rng.normal(size=c), "softmax")]


def test_fusion_zero_branch_algebra():
    rng = np.random.default_rng(54)
    c, h, w = 3, 2, 2
    features = rng.normal(size=(c, h, w))
    zero_branch = [AffineLayer(np.zeros((c, c)), np.zeros(c))]
    out = domain_fusion_forward(features, zero_branch, softmax_branch(rng, c),
                                identity_head(c))
    np.testing.assert_allclose(out, 1.5 * features, rtol=1e-12)


def test_fusion_single_pixel_hand_evaluation():
    # 1x1 spatial grid, 2 channels, identity head: everything is scalar algebra
    features = np.array([[[2.0]], [[-1.0]]])
    w1 = np.array([[1.0, 0.0], [0.0, 2.0]])
    b1 = np.array([0.5, 0.0])
    w2 = np.array([[1.0, 1.0], [0.0, 1.0]])
    b2 = np.array([0.0, 0.0])
    out = domain_fusion_forward(features,
                                [AffineLayer(w1, b1)],
                                [AffineLayer(w2, b2, "softmax")],
                                identity_head(2))
    pooled = np.array([2.0, -1.0])
    excite = w1 @ pooled + b1
    logits = w2 @ pooled + b2
    soft = np.exp(logits - logits.max())
    soft /= soft.sum()
    modulation = excite * soft
    gate = 1.0 / (1.0 + np.exp(-modulation))
    expected = (gate * pooled + pooled).reshape(2, 1, 1)
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def reference_fusion(features, branch1, branch2, head):
    """Layer-by-layer loop evaluation, separate from the vectorized path."""
    c, h, w = features.shape

    def run_layers(layers, vec):
        for layer in layers:
            out = np.empty(layer.weights.shape[0])
            for o in range(layer.weights.shape[0]):
                acc = layer.bias[o]
                for i in range(layer.weights.shape[1]):
                    acc += layer.weights[o, i] * vec[i]
                out[o] = acc
            if layer.activation == "relu":
                out = np.maximum(out, 0.0)
            elif layer.activation == "sigmoid":
                out = 1.0 / (1.0 + np.exp(-out))
            elif layer.activation == "softmax":
                e = np.exp(out - out.max())
                out = e / e.sum()
            vec = out
        return vec

    pooled = np.array([features[ch].sum() / (h * w) for ch in range(c)])
    modulation = run_layers(branch1, pooled) * run_layers(branch2, pooled)
    gate = 1.0 / (1.0 + np.exp(-modulation))
    head_out_dim = head[-1].weights.shape[0]
    out = np.empty((head_out_dim, h, w))
    for y in range(h):
        for x in range(w):
            mixed = gate * features[:, y, x] + features[:, y, x]
            out[:, y, x] = run_layers(head, mixed)
    return out


def test_fusion_matches_reference_evaluator():
    rng = np.random.default_rng(55)
    c_v, c_out, h, w = 5, 3, 4, 3
    features = rng.normal(size=(c_v, h, w))
    branch1 = [AffineLayer(rng.normal(size=(4, c_v)), rng.normal(size=4), "relu"),
               AffineLayer(rng.normal(size=(c_v, 4)), rng.normal(size=c_v))]
    branch2 = [AffineLayer(rng.normal(size=(c_v, c_v)), rng.normal(size=c_v), "softmax")]
    head = [AffineLayer(rng.normal(size=(c_out, c_v)), rng.normal(size=c_out), "sigmoid")]
    out = domain_fusion_forward(features, branch1, branch2, head)
    np.testing.assert_allclose(out, reference_fusion(features, branch1, branch2, head),
                               rtol=1e-10, atol=1e-12)


def test_fusion_requires_softmax_tail():
    rng = np.random.default_rng(56)
    features = rng.normal(size=(2, 2, 2))
    plain = [AffineLayer(np.eye(2), np.zeros(2))]
    with pytest.raises(LayerChainError):
        domain_fusion_forward(features, plain, plain, identity_head(2))


def test_fusion_chain_mismatch():
    rng = np.random.default_rng(57)
    features = rng.normal(size=(3, 2, 2))
    bad = [AffineLayer(rng.normal(size=(3, 4)), np.zeros(3), "softmax")]
    with pytest.raises(LayerChainError):
        domain_fusion_forward(features, identity_head(3), bad, identity_head(3))


# --- text contrastive -------------------------------------------------------


def test_contrastive_no_negatives_zero():
    rng = np.random.default_rng(58)
    items = well_conditioned_rows(rng, (5, 4))
    text = well_conditioned_rows(rng, (1, 4))
    res = text_contrastive_loss(items, text, np.zeros(5, dtype=int),
                                np.array([True]), tau=0.5)
    assert res.value == pytest.approx(0.0, abs=1e-12)
    assert np.abs(res.gradients["items"]).max() < 1e-12


def test_contrastive_sharpens_with_temperature():
    rng = np.random.default_rng(59)
    text = well_conditioned_rows(rng, (2, 6))
    classes = np.array([0, 0, 1, 1])
    items = text[classes]
    mask = np.ones(2, dtype=bool)
    values = [text_contrastive_loss(items, text, classes, mask, tau=t).value
              for t in (1.0, 0.5, 0.1)]
    assert values[0] > values[1] > values[2]
    assert values[2] < 1e-3


def test_contrastive_gradient_matches_finite_differences():
    rng = np.random.default_rng(60)
    items = well_conditioned_rows(rng, (6, 4))
    text = well_conditioned_rows(rng, (3, 4))
    classes = rng.integers(0, 3, size=6)
    mask = np.ones(3, dtype=bool)
    for normalize in (True, False):
        res = text_contrastive_loss(items, text, classes, mask, tau=0.3,
                                    normalize=normalize)
        fd = numeric_gradient(
            lambda x: text_contrastive_loss(x, text, classes, mask, tau=0.3,
                                            normalize=normalize).value,
            items, h=1e-5)
        assert max_relative_error(fd, res.gradients["items"]) < 1e-4


def test_contrastive_permutation_invariance():
    rng = np.random.default_rng(61)
    items = well_conditioned_rows(rng, (8, 5))
    text = well_conditioned_rows(rng, (4, 5))
    classes = rng.integers(0, 4, size=8)
    mask = np.ones(4, dtype=bool)
    perm = rng.permutation(8)
    v0 = text_contrastive_loss(items, text, classes, mask).value
    v1 = text_contrastive_loss(items[perm], text, classes[perm], mask).value
    assert v0 == pytest.approx(v1, rel=1e-12)


def test_contrastive_bad_temperature():
    with pytest.raises(ParameterError):
        text_contrastive_loss(np.ones((1, 2)), np.ones((1, 2)), [0], [True], tau=0.0)


def test_contrastive_empty_items():
    res = text_contrastive_loss(np.empty((0, 3)), np.ones((2, 3)), [], [True, True])
    assert res.value == 0.0
    assert res.gradients["items"].shape == (0, 3)


def test_contrastive_class_outside_mask_rejected():
    rng = np.random.default_rng(62)
    items = well_conditioned_rows(rng, (2, 3))
    text = well_conditioned_rows(rng, (2, 3))
    with pytest.raises(ParameterError):
        text_contrastive_loss(items, text, [0, 1], [True, False])


# --- combined label alignment -----------------------------------------------


def test_label_alignment_zero_configuration():
    vec = np.array([[1.0, 0.0, 0.0]])
    res = label_alignment_loss(point_logits=vec, pixel_logits=vec,
                               point_feats=vec, pixel_feats=vec, text=vec,
                               classes=np.array([0]), mask=np.array([True]), tau=0.5)
    assert res.value == pytest.approx(0.0, abs=1e-12)


def test_label_alignment_additivity_bit_for_bit():
    rng = np.random.default_rng(63)
    m, c, q = 7, 5, 3
    point_logits = well_conditioned_rows(rng, (m, q))
    pixel_logits = well_conditioned_rows(rng, (m, q))
    point_feats = well_conditioned_rows(rng, (m, c))
    pixel_feats = well_conditioned_rows(rng, (m, c))
    text = well_conditioned_rows(rng, (q, c))
    classes = rng.integers(0, q, size=m)
    mask = np.ones(q, dtype=bool)

    combined = label_alignment_loss(point_logits, pixel_logits, point_feats,
                                    pixel_feats, text, classes, mask, tau=0.2)
    p2t = text_contrastive_loss(point_feats, text, classes, mask, tau=0.2)
    v2t = text_contrastive_loss(pixel_feats, text, classes, mask, tau=0.2)
    i2p = cosine_alignment_loss(pixel_logits, point_logits)
    assert combined.value == p2t.value + i2p.value + v2t.value
    assert combined.components["point_to_text"] == p2t.value
    assert combined.components["image_to_point"] == i2p.value
    assert combined.components["image_to_text"] == v2t.value
    np.testing.assert_array_equal(combined.gradients["point_feats"],
                                  p2t.gradients["items"])
    np.testing.assert_array_equal(combined.gradients["pixel_logits"],
                                  i2p.gradients["a"])


# --- cross entropy ----------------------------------------------------------


def test_cross_entropy_saturates_with_margin():
    values = []
    for margin in (1.0, 5.0, 10.0):
        logits = np.zeros((4, 3))
        targets = np.array([0, 1, 2, 0])
        logits[np.arange(4), targets] = margin
        values.append(cross_entropy_loss(logits, targets, ignore_id=-1).value)
    assert values[0] > values[1] > values[2]
    assert values[2] < 1e-3


def test_cross_entropy_uniform_logits():
    res = cross_entropy_loss(np.zeros((6, 4)), np.array([0, 1, 2, 3, 0, 1]), ignore_id=-1)
    assert res.value == pytest.approx(math.log(4.0), rel=1e-12)


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(64)
    logits = rng.normal(size=(9, 5))
    targets = rng.integers(0, 5, size=9)
    targets[2] = -1
    res = cross_entropy_loss(logits, targets, ignore_id=-1)
    fd = numeric_gradient(lambda x: cross_entropy_loss(x, targets, ignore_id=-1).value,
                          logits, h=1e-5)
    assert max_relative_error(fd, res.gradients["logits"]) < 1e-4


def test_cross_entropy_all_ignored():
    with pytest.raises(EmptyTargetError):
        cross_entropy_loss(np.zeros((3, 2)), np.full(3, 9), ignore_id=9)


# --- lovasz softmax ----------------------------------------------------------


def lovasz_definition_oracle(probs, targets):
    """Evaluate the extension from its set definition, prefix by prefix."""
    present = sorted(set(int(t) for t in targets))
    n = len(targets)
    total = 0.0
    for c in present:
        fg = {i for i in range(n) if targets[i] == c}
        errors = np.array([1.0 - probs[i, c] if i in fg else probs[i, c]
                           for i in range(n)])
        order = np.argsort(-errors, kind="stable")
        loss_c = 0.0
        delta_prev = 0.0
        flipped: set[int] = set()
        for i in order:
            flipped.add(int(i))
            pred = (fg - flipped) | (flipped - fg)
            pred = (fg - flipped) | {j for j in flipped if j not in fg}
            union = fg | pred
            inter = fg & pred
            delta = 1.0 - (len(inter) / len(union) if union else 1.0)
            loss_c += errors[i] * (delta - delta_prev)
            delta_prev = delta
        total += loss_c
    return total / len(present)


def one_hot(rows, q):
    out = np.zeros((len(rows), q))
    out[np.arange(len(rows)), rows] = 1.0
    return out


def jaccard_vertex_oracle(pred_class, targets):
    present = sorted(set(int(t) for t in targets))
    vals = []
    for c in present:
        p = pred_class == c
        g = targets == c
        vals.append(1.0 - (p & g).sum() / (p | g).sum())
    return float(np.mean(vals))


def test_lovasz_vertex_equals_one_minus_jaccard():
    rng = np.random.default_rng(65)
    for _ in range(25):
        n, q = int(rng.integers(3, 30)), int(rng.integers(2, 5))
        targets = rng.integers(0, q, size=n)
        pred = rng.integers(0, q, size=n)
        res = lovasz_softmax_loss(one_hot(pred, q), targets, ignore_id=-1)
        assert res.value == pytest.approx(jaccard_vertex_oracle(pred, targets), abs=1e-12)


def test_lovasz_perfect_prediction_zero():
    targets = np.array([0, 1, 2, 1])
    res = lovasz_softmax_loss(one_hot(targets, 3), targets, ignore_id=-1)
    assert res.value == 0.0


def test_lovasz_small_case_matches_definition_oracle():
    rng = np.random.default_rng(66)
    for _ in range(20):
        logits = rng.normal(size=(3, 2))
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        targets = rng.integers(0, 2, size=3)
        res = lovasz_softmax_loss(probs, targets, ignore_id=-1)
        assert res.value == pytest.approx(lovasz_definition_oracle(probs, targets),
                                          rel=1e-12, abs=1e-12)


def test_lovasz_larger_cases_match_definition_oracle():
    rng = np.random.default_rng(67)
    for _ in range(5):
        n, q = 12, 3
        logits = rng.normal(size=(n, q))
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        targets = rng.integers(0, q, size=n)
        targets[0] = -1
        res = lovasz_softmax_loss(probs, targets, ignore_id=-1)
        keep = targets != -1
        assert res.value == pytest.approx(
            lovasz_definition_oracle(probs[keep], targets[keep]), rel=1e-12, abs=1e-12)


def test_lovasz_subgradient_matches_finite_differences():
    rng = np.random.default_rng(68)
    n, q = 6, 3
    logits = rng.normal(size=(n, q))
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    targets = rng.integers(0, q, size=n)
    res = lovasz_softmax_loss(probs, targets, ignore_id=-1)
    fd = numeric_gradient(lambda x: lovasz_softmax_loss(x, targets, ignore_id=-1).value,
                          probs, h=2e-7)
    assert max_relative_error(fd, res.gradients["probs"], floor=1e-6) < 1e-4


def test_lovasz_rejects_unnormalized_rows():
    with pytest.raises(InvalidProbabilityError):
        lovasz_softmax_loss(np.array([[0.7, 0.7]]), np.array([0]), ignore_id=-1)


# --- l1 offsets --------------------------------------------------------------


def test_l1_exact_match_zero():
    x = np.ones((4, 3))
    res = l1_offset_loss(x, x.copy(), np.ones(4, dtype=bool))
    assert res.value == 0.0
    assert np.abs(res.gradients["pred_offsets"]).max() == 0.0


def test_l1_single_row_unit_error():
    pred = np.array([[1.0, 1.0, 1.0], [9.0, 9.0, 9.0]])
    target = np.zeros((2, 3))
    res = l1_offset_loss(pred, target, np.array([True, False]))
    assert res.value == 1.0


def test_l1_gradient_away_from_kinks():
    rng = np.random.default_rng(69)
    target = rng.normal(size=(7, 3))
    signs = rng.choice([-1.0, 1.0], size=(7, 3))
    pred = target + signs * rng.uniform(0.1, 1.0, size=(7, 3))
    mask = rng.random(7) < 0.7
    mask[0] = True
    res = l1_offset_loss(pred, target, mask)
    fd = numeric_gradient(lambda x: l1_offset_loss(x, target, mask).value, pred, h=1e-5)
    assert max_relative_error(fd, res.gradients["pred_offsets"]) < 1e-4


def test_l1_empty_mask():
    res = l1_offset_loss(np.ones((3, 3)), np.zeros((3, 3)), np.zeros(3, dtype=bool))
    assert res.value == 0.0


# --- total objective ---------------------------------------------------------


def test_total_zero_parts():
    assert total_objective({"a": 0.0, "b": 0.0}).value == 0.0


def test_total_simple_sum():
    parts = {f"l{i}": float(i) for i in range(1, 6)}
    assert total_objective(parts).value == 15.0


def test_total_matches_independent_sum_and_reorder():
    rng = np.random.default_rng(70)
    names = ["v2p", "label", "ce", "lovasz", "l1"]
    values = rng.normal(size=5) ** 2
    parts = dict(zip(names, values))
    res = total_objective(parts)
    assert res.value == pytest.approx(float(sum(sorted(values))), rel=1e-15)
    reordered = total_objective(dict(reversed(list(parts.items()))))
    assert res.value == reordered.value
    assert res.components == parts


def test_total_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        total_objective({"a": float("nan")})
