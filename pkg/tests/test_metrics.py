import itertools

import numpy as np
import pytest

from oceseg import (
    DegenerateError,
    ShapeError,
    detection_scores,
    format_score_table,
    iou_matrix,
    match_at_threshold,
    scores_from_counts,
    seg_score,
    seg_score_dataset,
    threshold_sweep,
)


def random_mask(rng, shape=(12, 12), n_blobs=3):
    mask = np.zeros(shape, np.int32)
    for ident in range(1, n_blobs + 1):
        r = rng.integers(0, shape[0] - 3)
        c = rng.integers(0, shape[1] - 3)
        h = rng.integers(2, 4)
        w = rng.integers(2, 4)
        mask[r:r + h, c:c + w] = ident
    return mask


def brute_force_optimal_matches(gt, pred, t):
    """Most matches over all one-to-one assignments of pairs with IoU >= t."""
    iou, _, gt_ids, pred_ids, _, _ = iou_matrix(gt, pred)
    G, P = iou.shape
    admissible = [(g, p) for g in range(G) for p in range(P) if iou[g, p] >= t]
    best = 0
    best_sets = []
    for r in range(len(admissible), -1, -1):
        for combo in itertools.combinations(admissible, r):
            gs = [g for g, _ in combo]
            ps = [p for _, p in combo]
            if len(set(gs)) == len(gs) and len(set(ps)) == len(ps):
                best = r
                best_sets.append(combo)
        if best_sets:
            break
    return best, best_sets


# ---------------------------------------------------------------------------

def test_iou_identical_and_disjoint():
    a = np.zeros((6, 6), int)
    a[1:3, 1:3] = 1
    assert iou_matrix(a, a)[0][0, 0] == 1.0
    b = np.zeros((6, 6), int)
    b[4:6, 4:6] = 1
    assert iou_matrix(a, b)[0][0, 0] == 0.0


def test_iou_partial_overlap_third():
    gt = np.zeros((4, 4), int)
    gt[0, 0] = gt[0, 1] = 1
    pr = np.zeros((4, 4), int)
    pr[0, 1] = pr[1, 1] = 1
    assert abs(iou_matrix(gt, pr)[0][0, 0] - 1 / 3) < 1e-12


def test_iou_shape_mismatch():
    with pytest.raises(ShapeError):
        iou_matrix(np.zeros((3, 3), int), np.zeros((4, 4), int))


def test_match_perfect_and_empty():
    rng = np.random.default_rng(0)
    gt = random_mask(rng)
    m = match_at_threshold(gt, gt, 0.5)
    n = len(np.unique(gt)) - 1
    assert m.tp == n and m.fp == 0 and m.fn == 0
    m = match_at_threshold(gt, np.zeros_like(gt), 0.5)
    assert m.tp == 0 and m.fn == n and m.fp == 0


def test_match_counts_mixed():
    gt = np.zeros((10, 10), int)
    gt[0:4, 0:4] = 1
    gt[6:9, 6:9] = 2
    pred = np.zeros((10, 10), int)
    pred[0:4, 0:4] = 5  # IoU 1.0 with gt 1
    pred[5:6, 0:2] = 7  # matches nothing
    m = match_at_threshold(gt, pred, 0.5)
    assert m.tp == 1 and m.fp == 1 and m.fn == 1


def test_detection_scores_formulas():
    s = scores_from_counts(1, 1, 1)
    assert s["f1"] == 0.5 and s["recall"] == 0.5 and abs(s["accuracy"] - 1 / 3) < 1e-12
    assert scores_from_counts(0, 0, 0) == {
        "f1": 0.0, "recall": 0.0, "precision": 0.0, "accuracy": 0.0,
    }
    s = scores_from_counts(4, 0, 0)
    assert s["f1"] == s["recall"] == s["precision"] == s["accuracy"] == 1.0


def test_seg_score_hand_cases():
    gt = np.zeros((4, 4), int)
    gt[:2, :2] = 1  # 4 px
    pred = np.zeros((4, 4), int)
    pred[0, 0] = pred[0, 1] = pred[1, 0] = 1
    pred[2, 2] = 1  # extra px of same instance
    assert abs(seg_score(gt, pred) - 0.6) < 1e-12  # overlap 3 > 2, IoU 3/5
    # exactly half is NOT matched
    pred2 = np.zeros((4, 4), int)
    pred2[0, 0] = pred2[0, 1] = 1
    assert seg_score(gt, pred2) == 0.0
    # perfect
    assert seg_score(gt, gt) == 1.0
    with pytest.raises(DegenerateError):
        seg_score(np.zeros((4, 4), int), pred)


def test_scores_invariant_under_id_permutation():
    rng = np.random.default_rng(4)
    gt = random_mask(rng)
    pred = random_mask(rng)
    perm = {0: 0, 1: 7, 2: 5, 3: 9}
    gt_p = np.vectorize(perm.get)(gt)
    base = match_at_threshold(gt, pred, 0.5)
    permuted = match_at_threshold(gt_p, pred, 0.5)
    assert (base.tp, base.fp, base.fn) == (permuted.tp, permuted.fp, permuted.fn)
    if len(np.unique(gt)) > 1:
        assert abs(seg_score(gt, pred) - seg_score(gt_p, pred)) < 1e-12


def test_greedy_equals_exhaustive_at_half():
    rng = np.random.default_rng(12)
    for trial in range(100):
        gt = random_mask(rng, n_blobs=int(rng.integers(1, 4)))
        pred = random_mask(rng, n_blobs=int(rng.integers(1, 4)))
        m = match_at_threshold(gt, pred, 0.5)
        best, _ = brute_force_optimal_matches(gt, pred, 0.5)
        assert m.tp == best, trial


def test_threshold_sweep_single_image_and_monotone():
    rng = np.random.default_rng(9)
    gt = random_mask(rng)
    pred = random_mask(rng)
    thresholds = [0.3, 0.5, 0.75, 0.9]
    rows = threshold_sweep([gt], [pred], thresholds)
    by_metric = {}
    for metric, t, v in rows:
        by_metric.setdefault(metric, []).append(v)
        assert 0.0 <= v <= 1.0
        single = detection_scores(match_at_threshold(gt, pred, t))
        assert abs(single[metric] - v) < 1e-12
    for metric, vals in by_metric.items():
        assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:])), metric


def test_threshold_sweep_three_image_hand_table():
    # image 1: perfect single object; image 2: one hit one miss; image 3: empty pred
    gt1 = np.zeros((6, 6), int); gt1[1:4, 1:4] = 1
    pr1 = gt1.copy()
    gt2 = np.zeros((6, 6), int); gt2[0:3, 0:3] = 1; gt2[4:6, 4:6] = 2
    pr2 = np.zeros((6, 6), int); pr2[0:3, 0:3] = 3
    gt3 = np.zeros((6, 6), int); gt3[2:5, 2:5] = 1
    pr3 = np.zeros((6, 6), int)
    rows = threshold_sweep([gt1, gt2, gt3], [pr1, pr2, pr3], [0.5])
    vals = {m: v for m, _, v in rows}
    # pooled: TP=2, FP=0, FN=2
    assert vals["recall"] == 0.5 and vals["precision"] == 1.0
    assert abs(vals["f1"] - 2 / 3) < 1e-12 and vals["accuracy"] == 0.5
    # per-image mode averages per-image scores
    rows_pi = threshold_sweep([gt1, gt2, gt3], [pr1, pr2, pr3], [0.5], per_image=True)
    vals_pi = {m: v for m, _, v in rows_pi}
    assert abs(vals_pi["recall"] - np.mean([1.0, 0.5, 0.0])) < 1e-12


def test_seg_dataset_pools_objects():
    gt1 = np.zeros((6, 6), int); gt1[1:4, 1:4] = 1
    gt2 = np.zeros((6, 6), int); gt2[0:3, 0:3] = 1; gt2[4:6, 4:6] = 2
    v = seg_score_dataset([gt1, gt2], [gt1, np.zeros_like(gt2)])
    assert abs(v - 1 / 3) < 1e-12  # one perfect of three objects


def test_format_score_table_header():
    table = format_score_table([("f1", 0.5, 1.0)])
    lines = table.strip().split("\n")
    assert lines[0] == "metric\tthreshold\tvalue"
    assert lines[1].startswith("f1\t0.5\t1.000000")
