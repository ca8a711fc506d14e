"""Agreement-metric checks against enumeration and permutation oracles."""

import csv
import itertools
import json

import numpy as np
import pytest

from volprob import metrics as mt
from volprob.errors import ShapeError, UsageError


def iou_loops(a, b):
    """IoU by explicit voxel counting."""
    inter = union = 0
    for x, y in zip(np.asarray(a).reshape(-1), np.asarray(b).reshape(-1)):
        if x and y:
            inter += 1
        if x or y:
            union += 1
    return 1.0 if union == 0 else inter / union


def ged_oracle(gt, pred):
    """Literal enumeration of every ordered pair, self-pairs included."""
    cross = [1.0 - iou_loops(s, y) for s in pred for y in gt]
    dss = [1.0 - iou_loops(s, t) for s in pred for t in pred]
    dyy = [1.0 - iou_loops(y, t) for y in gt for t in gt]
    return (2.0 * sum(cross) / len(cross) - sum(dss) / len(dss)
            - sum(dyy) / len(dyy))


def brute_min_assignment(cost):
    """Minimum-cost matching by trying every permutation.

    Returns (min_total, lexicographically smallest optimal permutation);
    itertools yields permutations in lex order, so the first one within
    tolerance of the minimum is the tie-break winner.
    """
    n = cost.shape[0]
    totals = {p: sum(cost[i, p[i]] for i in range(n))
              for p in itertools.permutations(range(n))}
    best = min(totals.values())
    for p in itertools.permutations(range(n)):
        if totals[p] <= best + 1e-12:
            return best, p
    raise AssertionError("unreachable")


def matched_iou_brute(gt, pred):
    """Duplicate annotations, then permutation brute force on 1 - IoU."""
    n = len(pred)
    gt_dup = list(gt) * (n // 4)
    cost = np.array([[1.0 - iou_loops(g, p) for p in pred] for g in gt_dup])
    best, _ = brute_min_assignment(cost)
    return 1.0 - best / n


def protocol_oracle(gt, pred):
    """Independent per-slice reimplementation of the 2D protocol."""
    used = skipped = 0
    geds, ious = [], []
    for z in range(gt[0].shape[0]):
        g = [m[z] for m in gt]
        p = [m[z] for m in pred]
        if all(m.sum() == 0 for m in g) and all(m.sum() == 0 for m in p):
            skipped += 1
            continue
        used += 1
        geds.append(ged_oracle(g, p))
        ious.append(matched_iou_brute(g, p))
    if used == 0:
        return None, None, 0, skipped
    return sum(geds) / used, sum(ious) / used, used, skipped


def rand_masks(rng, n, shape, p=0.4):
    return [(rng.random(shape) < p).astype(np.uint8) for _ in range(n)]


def test_iou_conventions():
    z = np.zeros((2, 3), dtype=np.uint8)
    o = np.ones((2, 3), dtype=np.uint8)
    assert mt.iou(z, z) == 1.0
    assert mt.iou(z, o) == 0.0
    assert mt.iou(o, o) == 1.0
    assert mt.iou_distance(o, o) == 0.0
    with pytest.raises(ShapeError):
        mt.iou(np.zeros((2, 2)), np.zeros((2, 3)))


def test_iou_matches_counting_loops():
    rng = np.random.default_rng(0)
    for _ in range(25):
        a, b = rand_masks(rng, 2, (3, 4), p=rng.uniform(0.1, 0.9))
        assert mt.iou(a, b) == pytest.approx(iou_loops(a, b), abs=1e-15)


def test_hand_example_reproduces_exactly():
    # two-voxel grid: annotations alternate {[1,0],[0,1]}, both
    # predictions are [1,1]; every cross distance is 0.5, predictions
    # never differ, and half the annotation pairs differ completely:
    # 2*0.5 - 0 - 0.5 = 0.5
    a = np.array([1, 0], dtype=np.uint8)
    b = np.array([0, 1], dtype=np.uint8)
    s = np.array([1, 1], dtype=np.uint8)
    pair = mt.MaskSetPair(gt=[a, b, a.copy(), b.copy()], pred=[s, s.copy()])
    assert mt.ged_squared(pair) == 0.5


def test_ged_matches_enumeration_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        gt = rand_masks(rng, 4, shape, p=rng.uniform(0.0, 1.0))
        pred = rand_masks(rng, int(rng.integers(1, 9)), shape, p=rng.uniform(0.0, 1.0))
        pair = mt.MaskSetPair(gt=gt, pred=pred)
        assert mt.ged_squared(pair) == pytest.approx(ged_oracle(gt, pred), abs=1e-12)


def test_ged_custom_distance_callable():
    rng = np.random.default_rng(2)
    gt = rand_masks(rng, 4, (2, 3))
    pred = rand_masks(rng, 3, (2, 3))
    pair = mt.MaskSetPair(gt=gt, pred=pred)
    # the callable route must agree with the vectorized default when the
    # callable is the default distance itself
    assert mt.ged_squared(pair, distance=mt.iou_distance) == pytest.approx(
        mt.ged_squared(pair), abs=1e-12)
    # and with a genuinely different distance it follows the loops
    def size_gap(a, b):
        return abs(float(a.sum()) - float(b.sum()))
    cross = np.mean([[size_gap(s, y) for y in gt] for s in pred])
    dss = np.mean([[size_gap(s, t) for t in pred] for s in pred])
    dyy = np.mean([[size_gap(y, t) for t in gt] for y in gt])
    assert mt.ged_squared(pair, distance=size_gap) == pytest.approx(
        2 * cross - dss - dyy, abs=1e-12)


def test_hungarian_matches_permutation_brute_force():
    rng = np.random.default_rng(3)
    for trial in range(500):
        n = int(rng.integers(1, 7))
        if trial % 2:
            cost = rng.uniform(0, 1, (n, n))
        else:
            # small integer costs force plenty of ties
            cost = rng.integers(0, 4, (n, n)).astype(np.float64)
        res = mt.hungarian_assign(cost)
        best, lex_perm = brute_min_assignment(cost)
        assert res.total_cost == pytest.approx(best, abs=1e-12)
        assert res.matching == lex_perm
        assert sorted(res.matching) == list(range(n))


def test_hungarian_validation():
    with pytest.raises(ShapeError):
        mt.hungarian_assign(np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        mt.hungarian_assign(np.zeros(4))
    with pytest.raises(UsageError):
        mt.hungarian_assign(np.zeros((0, 0)))
    with pytest.raises(UsageError):
        mt.hungarian_assign(np.array([[np.inf]]))
    with pytest.raises(UsageError):
        mt.hungarian_assign(np.array([[np.nan]]))


def test_matched_iou_multiset_equal_returns_one():
    rng = np.random.default_rng(4)
    gt = rand_masks(rng, 4, (2, 3, 3))
    pair = mt.MaskSetPair(gt=gt, pred=[gt[2], gt[0], gt[3], gt[1]])
    assert mt.hungarian_matched_iou(pair) == 1.0
    # eight predictions: the duplicated annotations, shuffled
    pred8 = [gt[i] for i in (3, 1, 0, 2, 1, 3, 2, 0)]
    assert mt.hungarian_matched_iou(mt.MaskSetPair(gt=gt, pred=pred8)) == 1.0


def test_matched_iou_vs_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(20):
        gt = rand_masks(rng, 4, (2, 3), p=rng.uniform(0.2, 0.8))
        pred = rand_masks(rng, 4, (2, 3), p=rng.uniform(0.2, 0.8))
        pair = mt.MaskSetPair(gt=gt, pred=pred)
        assert mt.hungarian_matched_iou(pair) == pytest.approx(
            matched_iou_brute(gt, pred), abs=1e-12)
    gt = rand_masks(rng, 4, (2, 3))
    pred = rand_masks(rng, 8, (2, 3))
    assert mt.hungarian_matched_iou(mt.MaskSetPair(gt=gt, pred=pred)) == pytest.approx(
        matched_iou_brute(gt, pred), abs=1e-12)


def test_matched_iou_requires_multiple_of_four():
    rng = np.random.default_rng(6)
    gt = rand_masks(rng, 4, (2, 2))
    pair = mt.MaskSetPair(gt=gt, pred=rand_masks(rng, 3, (2, 2)))
    with pytest.raises(UsageError):
        mt.hungarian_matched_iou(pair)


def test_mask_set_pair_validation():
    rng = np.random.default_rng(7)
    masks = rand_masks(rng, 5, (2, 2))
    with pytest.raises(UsageError):
        mt.MaskSetPair(gt=masks[:3], pred=masks[3:])
    with pytest.raises(UsageError):
        mt.MaskSetPair(gt=masks[:4], pred=[])
    with pytest.raises(ShapeError):
        mt.MaskSetPair(gt=masks[:4], pred=[np.zeros((3, 3), dtype=np.uint8)])


def test_protocol_matches_independent_reimplementation():
    rng = np.random.default_rng(8)
    for _ in range(50):
        shape = (int(rng.integers(2, 6)), 3, 3)
        density = rng.uniform(0.0, 0.5)
        gt = rand_masks(rng, 4, shape, p=density)
        pred = rand_masks(rng, 4, shape, p=density)
        pair = mt.MaskSetPair(gt=gt, pred=pred)
        got = mt.eval_2d_protocol(pair)
        ged, iou2, used, skipped = protocol_oracle(gt, pred)
        assert got.n_slices_used == used
        assert got.n_slices_skipped == skipped
        if used == 0:
            assert got.ged is None and got.matched_iou is None
        else:
            assert got.ged == pytest.approx(ged, abs=1e-12)
            assert got.matched_iou == pytest.approx(iou2, abs=1e-12)


def test_protocol_keeps_slice_with_predicted_content_only():
    # annotations empty on slice 1 but a prediction marks it: not skipped
    gt = [np.zeros((2, 2, 2), dtype=np.uint8) for _ in range(4)]
    for m in gt:
        m[0, 0, 0] = 1
    pred = [np.zeros((2, 2, 2), dtype=np.uint8) for _ in range(4)]
    for m in pred:
        m[0, 0, 0] = 1
    pred[0][1, 1, 1] = 1
    res = mt.eval_2d_protocol(mt.MaskSetPair(gt=gt, pred=pred))
    assert res.n_slices_used == 2
    assert res.n_slices_skipped == 0


def test_protocol_all_empty_returns_none():
    gt = [np.zeros((3, 2, 2), dtype=np.uint8) for _ in range(4)]
    pred = [np.zeros((3, 2, 2), dtype=np.uint8) for _ in range(4)]
    res = mt.eval_2d_protocol(mt.MaskSetPair(gt=gt, pred=pred))
    assert res.ged is None
    assert res.matched_iou is None
    assert res.n_slices_used == 0
    assert res.n_slices_skipped == 3


def test_eval_case_bundles_components():
    rng = np.random.default_rng(9)
    gt = rand_masks(rng, 4, (3, 3, 3))
    pred = rand_masks(rng, 4, (3, 3, 3))
    pair = mt.MaskSetPair(gt=gt, pred=pred)
    m = mt.eval_case(pair)
    sl = mt.eval_2d_protocol(pair)
    assert m.ged3d == mt.ged_squared(pair)
    assert m.iou3d == mt.hungarian_matched_iou(pair)
    assert m.ged2d == sl.ged
    assert m.iou2d == sl.matched_iou
    assert m.n_samples == 4
    assert m.skipped_slices == sl.n_slices_skipped


def test_summarize_skips_missing_2d():
    rows = [
        {"case_id": "a", "ged3d": 0.2, "iou3d": 0.8, "ged2d": 0.4,
         "iou2d": 0.6, "n_samples": 4, "skipped_slices": 0},
        {"case_id": "b", "ged3d": 0.4, "iou3d": 0.6, "ged2d": None,
         "iou2d": None, "n_samples": 4, "skipped_slices": 3},
    ]
    s = mt.summarize(rows)
    assert s["n_cases"] == 2
    assert s["mean_ged3d"] == pytest.approx(0.3)
    assert s["mean_ged2d"] == pytest.approx(0.4)
    assert s["n_cases_with_2d"] == 1


def test_report_writers_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    gt = rand_masks(rng, 4, (2, 2, 2))
    records = []
    for cid in ("case_000", "case_001"):
        pair = mt.MaskSetPair(gt=gt, pred=rand_masks(rng, 4, (2, 2, 2)))
        records.append(mt.case_record(cid, mt.eval_case(pair)))
    empty_pair = mt.MaskSetPair(
        gt=[np.zeros((2, 2, 2), dtype=np.uint8)] * 4,
        pred=[np.zeros((2, 2, 2), dtype=np.uint8)] * 4)
    records.append(mt.case_record("case_002", mt.eval_case(empty_pair)))

    jpath = tmp_path / "report.jsonl"
    mt.write_metrics_jsonl(records, jpath)
    lines = jpath.read_text().splitlines()
    assert len(lines) == len(records) + 1
    parsed = [json.loads(ln) for ln in lines]
    assert parsed[-1]["record"] == "summary"
    assert parsed[-1]["n_cases"] == 3
    for rec, row in zip(records, parsed):
        assert row == json.loads(json.dumps(rec))

    cpath = tmp_path / "report.csv"
    mt.write_metrics_csv(records, cpath)
    with open(cpath, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["case_id"] for r in rows] == ["case_000", "case_001", "case_002"]
    # the all-empty case has no usable slices: blank cells, not "None"
    assert rows[2]["ged2d"] == ""
    assert float(rows[0]["ged3d"]) == pytest.approx(records[0]["ged3d"])
