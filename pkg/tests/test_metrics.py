import numpy as np
import pytest

from oracles import brute_map, fixture, random_fixture

from danet.metrics import (
    ImageDetections,
    ImageGroundTruth,
    MatchCounts,
    average_precision,
    coco_map,
    match_detections,
    precision_recall,
)


def test_precision_recall():
    assert precision_recall(MatchCounts(8, 2, 0))[0] == 0.8
    assert precision_recall(MatchCounts(0, 0, 5))[1] == 0.0
    assert precision_recall(MatchCounts()) == (0.0, 0.0)
    with pytest.raises(ValueError):
        MatchCounts(-1, 0, 0)


def test_match_examples():
    gt = np.array([[0, 0, 10, 10.0]])
    c, f = match_detections(gt, [0], gt, [0], 0.5)
    assert (c.tp, c.fp, c.fn) == (1, 0, 0) and list(f) == [True]
    c, f = match_detections(np.vstack([gt, gt]), [0, 0], gt, [0], 0.5)
    assert list(f) == [True, False] and (c.tp, c.fp, c.fn) == (1, 1, 0)
    c, f = match_detections(gt, [1], gt, [0], 0.5)
    assert (c.tp, c.fp, c.fn) == (0, 1, 1)


def test_ap_examples():
    assert average_precision([True], 1) == 1.0
    assert average_precision([False], 1) == 0.0
    assert abs(average_precision([True, False, True], 2) - (51 + 50 * 2 / 3) / 101) <= 1e-12
    assert abs(average_precision([True, False, True], 2) - 0.83498) <= 1e-5
    assert average_precision([], 0) is None
    assert average_precision([False], 0) == 0.0
    assert average_precision([], 3) == 0.0


def test_extra_low_fp_never_helps(rng):
    for _ in range(50):
        flags = list(rng.random(int(rng.integers(1, 12))) < 0.5)
        n_gt = sum(flags) + int(rng.integers(0, 3))
        if n_gt == 0:
            continue
        assert average_precision(flags + [False], n_gt) <= average_precision(flags, n_gt)


def run(dets, gts, classes=("a", "b")):
    return coco_map(
        [ImageDetections(b, l, s) for b, l, s in dets],
        [ImageGroundTruth(b, l) for b, l in gts],
        list(classes),
    )


def test_fixture_matches_brute_force():
    dets, gts = fixture()
    report = run(dets, gts)
    ref = brute_map(dets, gts, 2)
    for c, name in enumerate(("a", "b")):
        assert abs(report.ap[name] - np.mean(ref[c])) <= 1e-9
        assert abs(report.ap50[name] - ref[c][0]) <= 1e-9
    assert abs(report.map - np.mean([np.mean(r) for r in ref])) <= 1e-9


def test_random_fixtures_match_brute_force(rng):
    for _ in range(10):
        dets, gts = random_fixture(rng)
        report = run(dets, gts)
        ref = brute_map(dets, gts, 2)
        for c, name in enumerate(("a", "b")):
            if ref[c][0] is None:
                assert report.ap[name] is None
            else:
                assert abs(report.ap[name] - np.mean(ref[c])) <= 1e-9


def test_rescaling_invariance(rng):
    for _ in range(20):
        dets, gts = random_fixture(rng)
        base = run(dets, gts)
        warped = [(b, l, 1 / (1 + np.exp(-(3 * s - 1)))) for b, l, s in dets]
        other = run(warped, gts)
        assert base.ap == other.ap and base.map == other.map


def test_ap_non_increasing_in_threshold(rng):
    for _ in range(10):
        dets, gts = random_fixture(rng)
        report = run(dets, gts)
        for name in ("a", "b"):
            vals = [report.ap_per_threshold[(name, t)] for t in report.iou_thresholds]
            if vals[0] is not None:
                assert all(x >= y - 1e-12 for x, y in zip(vals, vals[1:]))


def test_perfect_and_empty():
    gts = [(np.array([[0, 0, 10, 10], [20, 20, 30, 30.0]]), np.array([0, 1]))]
    perfect = [(gts[0][0], gts[0][1], np.array([0.9, 0.8]))]
    assert run(perfect, gts).map == 1.0
    empty = [(np.zeros((0, 4)), np.zeros(0, int), np.zeros(0))]
    assert run(empty, gts).map == 0.0


def test_empty_class_excluded():
    gts = [(np.array([[0, 0, 10, 10.0]]), np.array([0]))]
    dets = [(np.array([[0, 0, 10, 10.0]]), np.array([0]), np.array([0.5]))]
    report = run(dets, gts)
    assert report.ap["b"] is None and report.map == 1.0


def test_report_outputs():
    dets, gts = fixture()
    report = run(dets, gts)
    assert '"mAP"' in report.to_json()
    head, row = report.table_csv("DANet").splitlines()
    assert head == "Method,a,b,mAP" and row.startswith("DANet,")
