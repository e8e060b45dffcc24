from collections import defaultdict

import numpy as np
import pytest

from lidarmerge.errors import (
    DegenerateBaselineError,
    DegenerateCleanError,
    InconsistentInputError,
    InvalidLabelError,
)
from lidarmerge.metrics import (
    ConfusionMatrix,
    PanopticStats,
    RobustnessTable,
    accumulate_confusion,
    panoptic_match,
    panoptic_scores,
    robustness_scores,
    semantic_scores,
)
from lidarmerge.panoptic import PanopticLabels

# --- oracles ------------------------------------------------------------------


def confusion_oracle(gt, pred, num_classes, ignore_id):
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    for g, p in zip(gt, pred):
        if g == ignore_id:
            continue
        counts[g][p] += 1
    return counts


def semantic_oracle(counts):
    """Direct evaluation of IoU_c = TP_c / (TP_c + FP_c + FN_c)."""
    q = counts.shape[0]
    iou, acc, present, gt_present = {}, {}, [], []
    for c in range(q):
        tp = counts[c, c]
        fn = counts[c].sum() - tp
        fp = counts[:, c].sum() - tp
        if tp + fp + fn > 0:
            present.append(c)
            iou[c] = tp / (tp + fp + fn)
        if counts[c].sum() > 0:
            gt_present.append(c)
            acc[c] = tp / counts[c].sum()
    miou = sum(iou[c] for c in present) / len(present) if present else None
    macc = sum(acc[c] for c in gt_present) / len(gt_present) if gt_present else None
    return iou, acc, miou, macc, present


def brute_force_panoptic(gt_sem, gt_inst, pred_sem, pred_inst, num_classes, ignore_id):
    """All-pairs set-IoU matcher; completely independent of the fast path."""
    gt_segs: dict[tuple, set] = defaultdict(set)
    pred_segs: dict[tuple, set] = defaultdict(set)
    for i in range(len(gt_sem)):
        if gt_sem[i] == ignore_id:
            continue
        gt_segs[(int(gt_sem[i]), int(gt_inst[i]))].add(i)
        if pred_sem[i] != ignore_id:
            pred_segs[(int(pred_sem[i]), int(pred_inst[i]))].add(i)

    tp = np.zeros(num_classes, dtype=np.int64)
    fp = np.zeros(num_classes, dtype=np.int64)
    fn = np.zeros(num_classes, dtype=np.int64)
    iou_sum = np.zeros(num_classes)
    matched_gt, matched_pred = set(), set()
    for gkey, gset in gt_segs.items():
        for pkey, pset in pred_segs.items():
            if gkey[0] != pkey[0]:
                continue
            iou = len(gset & pset) / len(gset | pset)
            if iou > 0.5:
                tp[gkey[0]] += 1
                iou_sum[gkey[0]] += iou
                matched_gt.add(gkey)
                matched_pred.add(pkey)
    for gkey in gt_segs:
        if gkey not in matched_gt:
            fn[gkey[0]] += 1
    for pkey in pred_segs:
        if pkey not in matched_pred:
            fp[pkey[0]] += 1
    return tp, fp, fn, iou_sum


def pq_formula_oracle(tp, fp, fn, iou_sum, semantic_iou, thing_mask):
    """Spreadsheet-style direct evaluation of the PQ family."""
    q = len(tp)
    present = [c for c in range(q) if tp[c] + fp[c] + fn[c] > 0]
    sq = {c: (iou_sum[c] / tp[c] if tp[c] else 0.0) for c in range(q)}
    rq = {c: (tp[c] / (tp[c] + 0.5 * fp[c] + 0.5 * fn[c])
              if tp[c] + fp[c] + fn[c] else 0.0) for c in range(q)}
    pq = {c: sq[c] * rq[c] for c in range(q)}

    def mean_over(cs, table):
        return sum(table[c] for c in cs) / len(cs) if cs else None

    dagger = {c: (pq[c] if thing_mask[c] else semantic_iou[c]) for c in present}
    things = [c for c in present if thing_mask[c]]
    stuff = [c for c in present if not thing_mask[c]]
    return {
        "pq": mean_over(present, pq), "sq": mean_over(present, sq),
        "rq": mean_over(present, rq), "dagger": mean_over(present, dagger),
        "pq_th": mean_over(things, pq), "pq_st": mean_over(stuff, pq),
        "sq_th": mean_over(things, sq), "sq_st": mean_over(stuff, sq),
        "rq_th": mean_over(things, rq), "rq_st": mean_over(stuff, rq),
    }


def random_micro_scene(rng, max_points=60, max_classes=4, max_instances=5):
    q = int(rng.integers(2, max_classes + 1))
    n = int(rng.integers(4, max_points + 1))
    thing_mask = rng.random(q) < 0.6
    ignore_id = q + 5

    def one_side(sem_source):
        sem = sem_source.copy()
        inst = np.zeros(n, dtype=np.int64)
        for i in range(n):
            if sem[i] != ignore_id and thing_mask[sem[i]]:
                inst[i] = rng.integers(1, max_instances + 1)
        return sem, inst

    gt_sem = rng.integers(0, q, size=n)
    gt_sem[rng.random(n) < 0.1] = ignore_id
    pred_sem = gt_sem.copy()
    flip = rng.random(n) < 0.3
    pred_sem[flip] = rng.integers(0, q, size=int(flip.sum()))
    gt_sem_, gt_inst = one_side(gt_sem)
    pred_sem_, pred_inst = one_side(pred_sem)
    return gt_sem_, gt_inst, pred_sem_, pred_inst, q, ignore_id, thing_mask


# --- confusion / semantic -------------------------------------------------------


def test_confusion_diagonal_for_perfect_prediction():
    gt = np.array([0, 1, 2, 1, 0])
    cm = accumulate_confusion(gt, gt.copy(), num_classes=3, ignore_id=-1)
    np.testing.assert_array_equal(cm.counts, np.diag([2, 2, 1]))


def test_confusion_all_ignored_is_zero():
    cm = accumulate_confusion(np.full(4, 9), np.zeros(4, dtype=int),
                              num_classes=3, ignore_id=9)
    assert cm.counts.sum() == 0


def test_confusion_matches_counting_oracle():
    rng = np.random.default_rng(90)
    gt = rng.integers(0, 6, size=1000)
    gt[rng.random(1000) < 0.05] = 255
    pred = rng.integers(0, 6, size=1000)
    cm = accumulate_confusion(gt, pred, num_classes=6, ignore_id=255)
    np.testing.assert_array_equal(cm.counts, confusion_oracle(gt, pred, 6, 255))
    assert cm.total == int((gt != 255).sum())


def test_confusion_merge_is_order_independent():
    rng = np.random.default_rng(91)
    shards = [(rng.integers(0, 4, size=50), rng.integers(0, 4, size=50))
              for _ in range(6)]
    whole_gt = np.concatenate([s[0] for s in shards])
    whole_pred = np.concatenate([s[1] for s in shards])
    whole = accumulate_confusion(whole_gt, whole_pred, 4, -1)
    acc = ConfusionMatrix(4, -1)
    for gt, pred in reversed(shards):
        acc = acc + accumulate_confusion(gt, pred, 4, -1)
    np.testing.assert_array_equal(acc.counts, whole.counts)


def test_confusion_rejects_out_of_range():
    with pytest.raises(InvalidLabelError):
        accumulate_confusion(np.array([5]), np.array([0]), num_classes=3, ignore_id=-1)


def test_semantic_perfect_prediction():
    gt = np.array([0, 1, 2, 2])
    scores = semantic_scores(accumulate_confusion(gt, gt, 3, -1))
    assert scores.miou == 1.0 and scores.macc == 1.0


def test_semantic_hand_example():
    cm = ConfusionMatrix(2, -1, np.array([[5, 5], [0, 10]]))
    scores = semantic_scores(cm)
    assert scores.per_class_iou[0] == pytest.approx(0.5, abs=1e-15)
    assert scores.per_class_iou[1] == pytest.approx(10 / 15, abs=1e-15)
    assert scores.miou == pytest.approx((0.5 + 2 / 3) / 2, abs=1e-15)


def test_semantic_matches_formula_oracle():
    rng = np.random.default_rng(92)
    for _ in range(20):
        counts = rng.integers(0, 50, size=(5, 5))
        counts[rng.integers(0, 5)] = 0            # force an absent-ish row
        scores = semantic_scores(ConfusionMatrix(5, -1, counts))
        iou, acc, miou, macc, present = semantic_oracle(counts)
        for c in range(5):
            if c in iou:
                assert scores.per_class_iou[c] == pytest.approx(iou[c], abs=1e-12)
            else:
                assert np.isnan(scores.per_class_iou[c])
        if miou is None:
            assert scores.miou is None
        else:
            assert scores.miou == pytest.approx(miou, abs=1e-12)
        if macc is None:
            assert scores.macc is None
        else:
            assert scores.macc == pytest.approx(macc, abs=1e-12)


def test_semantic_empty_matrix_reports_absent():
    scores = semantic_scores(ConfusionMatrix(3, -1))
    assert scores.miou is None and scores.macc is None


def test_semantic_permutation_keeps_miou():
    rng = np.random.default_rng(93)
    counts = rng.integers(0, 30, size=(4, 4))
    perm = rng.permutation(4)
    base = semantic_scores(ConfusionMatrix(4, -1, counts))
    shuffled = semantic_scores(ConfusionMatrix(4, -1, counts[np.ix_(perm, perm)]))
    assert shuffled.miou == pytest.approx(base.miou, abs=1e-12)
    np.testing.assert_allclose(shuffled.per_class_iou, base.per_class_iou[perm],
                               atol=1e-15)


# --- panoptic matching ----------------------------------------------------------


def test_identical_labelings_all_tp():
    sem = np.array([0, 0, 1, 1, 1, 2])
    inst = np.array([1, 1, 2, 2, 2, 0])
    stats = panoptic_match(PanopticLabels(sem, inst), PanopticLabels(sem, inst),
                           num_classes=3, ignore_id=-1)
    assert stats.tp.sum() == 3 and stats.fp.sum() == 0 and stats.fn.sum() == 0
    np.testing.assert_allclose(stats.iou_sum[stats.tp > 0], 1.0)


def test_split_instance_boundary_case():
    gt = PanopticLabels(np.full(10, 1), np.full(10, 7))
    pred_inst = np.array([1] * 5 + [2] * 5)
    pred = PanopticLabels(np.full(10, 1), pred_inst)
    stats = panoptic_match(gt, pred, num_classes=2, ignore_id=-1)
    assert stats.tp[1] == 0 and stats.fn[1] == 1 and stats.fp[1] == 2


def test_match_stats_equal_brute_force_on_micro_scenes():
    rng = np.random.default_rng(94)
    for _ in range(50):
        gt_sem, gt_inst, pred_sem, pred_inst, q, ignore_id, _ = random_micro_scene(rng)
        stats = panoptic_match(PanopticLabels(gt_sem, gt_inst),
                               PanopticLabels(pred_sem, pred_inst), q, ignore_id)
        tp, fp, fn, iou_sum = brute_force_panoptic(gt_sem, gt_inst, pred_sem,
                                                   pred_inst, q, ignore_id)
        np.testing.assert_array_equal(stats.tp, tp)
        np.testing.assert_array_equal(stats.fp, fp)
        np.testing.assert_array_equal(stats.fn, fn)
        np.testing.assert_allclose(stats.iou_sum, iou_sum, atol=1e-12)


def test_instance_relabeling_invariance():
    rng = np.random.default_rng(95)
    gt_sem, gt_inst, pred_sem, pred_inst, q, ignore_id, _ = random_micro_scene(rng)
    base = panoptic_match(PanopticLabels(gt_sem, gt_inst),
                          PanopticLabels(pred_sem, pred_inst), q, ignore_id)
    relabeled = pred_inst * 13 + 100 * (pred_inst > 0)      # bijective on used ids
    again = panoptic_match(PanopticLabels(gt_sem, gt_inst),
                           PanopticLabels(pred_sem, relabeled), q, ignore_id)
    np.testing.assert_array_equal(base.tp, again.tp)
    np.testing.assert_array_equal(base.fp, again.fp)
    np.testing.assert_array_equal(base.fn, again.fn)
    np.testing.assert_allclose(base.iou_sum, again.iou_sum, atol=1e-15)


def test_match_length_mismatch():
    with pytest.raises(InconsistentInputError):
        panoptic_match(PanopticLabels(np.zeros(2, int), np.zeros(2, int)),
                       PanopticLabels(np.zeros(3, int), np.zeros(3, int)), 2, -1)


# --- panoptic scores --------------------------------------------------------------


def test_scores_perfect_prediction():
    sem = np.array([0, 1, 1, 2, 2, 2])
    inst = np.array([0, 1, 1, 1, 1, 2])
    stats = panoptic_match(PanopticLabels(sem, inst), PanopticLabels(sem, inst), 3, -1)
    out = panoptic_scores(stats, np.ones(3), np.array([False, True, True]))
    assert out.pq == 1.0 and out.sq == 1.0 and out.rq == 1.0 and out.pq_dagger == 1.0


def test_scores_single_class_hand_case():
    stats = PanopticStats(1)
    stats.tp[0] = 1
    stats.fp[0] = 1
    stats.iou_sum[0] = 0.8
    out = panoptic_scores(stats, np.zeros(1), np.array([True]))
    assert out.per_class_sq[0] == pytest.approx(0.8)
    assert out.per_class_rq[0] == pytest.approx(1 / 1.5)
    assert out.pq == pytest.approx(0.8 / 1.5)


def test_scores_match_formula_oracle_on_micro_scenes():
    rng = np.random.default_rng(96)
    for _ in range(30):
        gt_sem, gt_inst, pred_sem, pred_inst, q, ignore_id, thing_mask = \
            random_micro_scene(rng)
        stats = panoptic_match(PanopticLabels(gt_sem, gt_inst),
                               PanopticLabels(pred_sem, pred_inst), q, ignore_id)
        sem = semantic_scores(accumulate_confusion(gt_sem, pred_sem, q, ignore_id))
        sem_iou = np.nan_to_num(sem.per_class_iou)
        out = panoptic_scores(stats, sem_iou, thing_mask)
        oracle = pq_formula_oracle(stats.tp, stats.fp, stats.fn, stats.iou_sum,
                                   sem_iou, thing_mask)
        for got, want in [(out.pq, oracle["pq"]), (out.sq, oracle["sq"]),
                          (out.rq, oracle["rq"]), (out.pq_dagger, oracle["dagger"]),
                          (out.pq_things, oracle["pq_th"]), (out.pq_stuff, oracle["pq_st"]),
                          (out.sq_things, oracle["sq_th"]), (out.sq_stuff, oracle["sq_st"]),
                          (out.rq_things, oracle["rq_th"]), (out.rq_stuff, oracle["rq_st"])]:
            if want is None:
                assert got is None
            else:
                assert got == pytest.approx(want, abs=1e-12)
        # PQ = SQ * RQ exactly, and PQ <= RQ
        np.testing.assert_array_equal(out.per_class_pq,
                                      out.per_class_sq * out.per_class_rq)
        assert (out.per_class_pq <= out.per_class_rq + 1e-15).all()


# --- robustness ---------------------------------------------------------------


CORRUPTIONS = ["fog", "wet_ground", "snow", "motion_blur", "beam_missing",
               "crosstalk", "incomplete_echo", "cross_sensor"]


def test_self_comparison_gives_exact_100_mce():
    rng = np.random.default_rng(97)
    acc = rng.uniform(0.2, 0.8, size=(8, 3))
    table = RobustnessTable(CORRUPTIONS, acc, acc.copy(), clean=0.75)
    scores = robustness_scores(table)
    assert scores.mce == 100.0
    assert (scores.ce == 100.0).all()


def test_full_retention_gives_exact_100_mrr():
    clean = 0.731
    table = RobustnessTable(CORRUPTIONS, np.full((8, 3), clean),
                            np.full((8, 3), 0.5), clean=clean)
    scores = robustness_scores(table)
    assert scores.mrr == 100.0
    assert (scores.rr == 100.0).all()


def test_hand_filled_table_matches_direct_evaluation():
    rng = np.random.default_rng(98)
    candidate = rng.uniform(0.3, 0.9, size=(8, 3))
    baseline = rng.uniform(0.2, 0.8, size=(8, 3))
    clean = 0.8
    scores = robustness_scores(RobustnessTable(CORRUPTIONS, candidate, baseline, clean))
    for k in range(8):
        ce = sum(1 - candidate[k, l] for l in range(3)) \
            / sum(1 - baseline[k, l] for l in range(3)) * 100
        rr = sum(candidate[k, l] for l in range(3)) / (3 * clean) * 100
        assert scores.ce[k] == pytest.approx(ce, rel=1e-12)
        assert scores.rr[k] == pytest.approx(rr, rel=1e-12)
    assert scores.mce == pytest.approx(float(np.mean(scores.ce)), rel=1e-15)


def test_ce_moves_toward_100_as_candidate_approaches_baseline():
    rng = np.random.default_rng(99)
    baseline = rng.uniform(0.3, 0.7, size=(8, 3))
    candidate = np.clip(baseline + 0.2, 0.0, 0.99)
    gaps = []
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        blend = (1 - t) * candidate + t * baseline
        scores = robustness_scores(RobustnessTable(CORRUPTIONS, blend, baseline, 0.8))
        gaps.append(abs(scores.mce - 100.0))
    assert all(a >= b - 1e-9 for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-9


def test_degenerate_baseline_rejected():
    with pytest.raises(DegenerateBaselineError):
        RobustnessTable(CORRUPTIONS, np.full((8, 3), 0.5), np.ones((8, 3)), clean=0.5)


def test_degenerate_clean_rejected():
    table = RobustnessTable(CORRUPTIONS, np.full((8, 3), 0.5),
                            np.full((8, 3), 0.5), clean=0.0)
    with pytest.raises(DegenerateCleanError):
        robustness_scores(table)
