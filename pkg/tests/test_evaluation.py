import numpy as np
import pytest

import silverdet.evaluation as ev
from silverdet.detector import Detection
from silverdet.synthdata import Annotation


def box(cx, cy, w, h, cls=0):
    return Annotation(cls, cx, cy, w, h)


def d(ann, conf):
    return Detection(ann, conf, 1.0)


# ---------------------------------------------------------------------------
# IoU

def test_iou_identical_box():
    a = box(0.5, 0.5, 0.2, 0.4)
    assert abs(ev.iou(a, a) - 1.0) < 1e-12


def test_iou_disjoint():
    assert ev.iou(box(0.2, 0.2, 0.1, 0.1), box(0.8, 0.8, 0.1, 0.1)) == 0.0


def test_iou_quarter_overlap():
    # equal 0.2-boxes offset by half their size in both axes:
    # intersection 0.01, union 0.07
    a = box(0.5, 0.5, 0.2, 0.2)
    b = box(0.6, 0.6, 0.2, 0.2)
    assert abs(ev.iou(a, b) - 1.0 / 7.0) < 1e-12


def test_iou_contained_box():
    a = box(0.5, 0.5, 0.4, 0.4)
    b = box(0.5, 0.5, 0.2, 0.2)
    assert abs(ev.iou(a, b) - 0.25) < 1e-12


def test_iou_symmetric(rng):
    for _ in range(100):
        a = box(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.05, 0.4, 2))
        b = box(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.05, 0.4, 2))
        assert ev.iou(a, b) == ev.iou(b, a)
        assert 0.0 <= ev.iou(a, b) <= 1.0


def test_iou_matches_pixel_grid_oracle(rng):
    n = 2000
    yy, xx = np.mgrid[0:n, 0:n]
    px, py = (xx + 0.5) / n, (yy + 0.5) / n

    def raster(b):
        return ((np.abs(px - b.cx) <= b.w / 2) & (np.abs(py - b.cy) <= b.h / 2))

    for _ in range(10):
        a = box(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.1, 0.4, 2))
        b = box(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.1, 0.4, 2))
        ma, mb = raster(a), raster(b)
        union = (ma | mb).sum()
        approx = (ma & mb).sum() / union if union else 0.0
        assert abs(ev.iou(a, b) - approx) < 5e-3


# ---------------------------------------------------------------------------
# matching

def test_match_simple_tp_fp():
    gts = [box(0.3, 0.3, 0.2, 0.2)]
    dets = [d(box(0.3, 0.3, 0.2, 0.2), 0.9), d(box(0.8, 0.8, 0.2, 0.2), 0.5)]
    assert ev.match_detections(dets, gts) == [True, False]


def test_match_each_gt_used_once():
    gts = [box(0.3, 0.3, 0.2, 0.2)]
    dets = [d(box(0.3, 0.3, 0.2, 0.2), 0.9), d(box(0.31, 0.3, 0.2, 0.2), 0.8)]
    assert ev.match_detections(dets, gts) == [True, False]


def test_match_prefers_highest_iou_gt():
    gts = [box(0.3, 0.3, 0.2, 0.2), box(0.35, 0.3, 0.2, 0.2)]
    dets = [d(box(0.35, 0.3, 0.2, 0.2), 0.9)]
    flags = ev.match_detections(dets, gts)
    assert flags == [True]
    # the exact-overlap gt (index 1) is consumed; a repeat of gt 0 still matches
    dets2 = [d(box(0.35, 0.3, 0.2, 0.2), 0.9), d(box(0.3, 0.3, 0.2, 0.2), 0.8)]
    assert ev.match_detections(dets2, gts) == [True, True]


def test_match_tie_takes_lower_gt_index():
    gts = [box(0.3, 0.3, 0.2, 0.2), box(0.3, 0.3, 0.2, 0.2)]
    dets = [d(box(0.3, 0.3, 0.2, 0.2), 0.9)]
    ev.match_detections(dets, gts)  # no error; greedy takes gt 0 first
    matched_twice = ev.match_detections(
        [d(box(0.3, 0.3, 0.2, 0.2), 0.9), d(box(0.3, 0.3, 0.2, 0.2), 0.8)], gts)
    assert matched_twice == [True, True]


def test_match_below_threshold_is_fp():
    gts = [box(0.3, 0.3, 0.2, 0.2)]
    dets = [d(box(0.42, 0.3, 0.2, 0.2), 0.9)]  # IoU well under 0.5
    assert ev.match_detections(dets, gts, iou_threshold=0.5) == [False]


# ---------------------------------------------------------------------------
# average precision

def test_ap_no_ground_truth_is_excluded():
    assert ev.average_precision([True], [0.9], 0) is None


def test_ap_no_detections():
    assert ev.average_precision([], [], 3) == 0.0


def test_ap_perfect_ranking():
    assert abs(ev.average_precision([True, True, True], [0.9, 0.8, 0.7], 3) - 1.0) < 1e-12


def test_ap_all_false_positives():
    assert ev.average_precision([False, False], [0.9, 0.8], 2) == 0.0


def test_ap_hand_computed_example():
    # ranked flags T T F T with 3 gt: recall steps at p=1, 1, 3/4
    ap = ev.average_precision([True, True, False, True], [0.9, 0.8, 0.7, 0.6], 3)
    assert abs(ap - 11.0 / 12.0) < 1e-12


def test_ap_interpolated_ranking_example():
    # ranked flags T F T with 2 gt: recall steps at p=1 and p=2/3,
    # all-points interpolation gives 0.5*1 + 0.5*(2/3) = 5/6
    ap = ev.average_precision([True, False, True], [0.9, 0.8, 0.7], 2)
    assert abs(ap - 5.0 / 6.0) < 1e-12


def test_ap_missed_gt_caps_recall():
    # one TP out of 2 gt at precision 1 -> AP 0.5
    ap = ev.average_precision([True], [0.9], 2)
    assert abs(ap - 0.5) < 1e-12


def ap_oracle(flags, confs, n_gt):
    """Independent all-points AP: recall steps weighted by running-max precision."""
    order = np.argsort(-np.asarray(confs), kind="stable")
    f = [flags[i] for i in order]
    tp = np.cumsum(f)
    fp = np.cumsum([not x for x in f])
    rec = tp / n_gt
    prec = tp / (tp + fp)
    ap = 0.0
    prev = 0.0
    for i in range(len(f)):
        if f[i]:
            ap += (rec[i] - prev) * prec[i:].max()
            prev = rec[i]
    return ap


def test_ap_matches_oracle_on_random_inputs(rng):
    for _ in range(200):
        n = int(rng.integers(1, 15))
        flags = (rng.uniform(size=n) < 0.5).tolist()
        confs = rng.uniform(0.1, 1.0, size=n).tolist()
        n_gt = int(sum(flags) + rng.integers(0, 4))
        if n_gt == 0:
            continue
        got = ev.average_precision(flags, confs, n_gt)
        assert abs(got - ap_oracle(flags, confs, n_gt)) < 1e-10


def test_ap_negative_gt_rejected():
    with pytest.raises(ValueError):
        ev.average_precision([], [], -1)


# ---------------------------------------------------------------------------
# dataset-level evaluation

def test_evaluate_detections_perfect():
    gts = [box(0.3, 0.3, 0.2, 0.2, cls=0), box(0.7, 0.7, 0.2, 0.2, cls=1)]
    dets = [d(gts[0], 0.9), d(gts[1], 0.8)]
    report = ev.evaluate_detections([(dets, gts)], num_classes=5)
    assert report.map == 1.0
    assert report.per_class_ap == {0: 1.0, 1: 1.0}
    assert report.counts[0] == {"gt": 1, "detections": 1, "tp": 1, "fp": 0}
    # classes without ground truth are excluded, not zero
    assert 2 not in report.per_class_ap


def test_evaluate_detections_wrong_class_is_fp():
    gt = box(0.3, 0.3, 0.2, 0.2, cls=0)
    det_wrong = d(box(0.3, 0.3, 0.2, 0.2, cls=1), 0.9)
    report = ev.evaluate_detections([([det_wrong], [gt])], num_classes=2)
    assert report.per_class_ap[0] == 0.0
    assert report.counts[1]["fp"] == 1


def test_evaluate_detections_pools_across_images():
    gt_a = box(0.3, 0.3, 0.2, 0.2)
    gt_b = box(0.7, 0.7, 0.2, 0.2)
    per_image = [([d(gt_a, 0.6)], [gt_a]), ([d(box(0.1, 0.1, 0.1, 0.1), 0.9)], [gt_b])]
    report = ev.evaluate_detections(per_image, num_classes=1)
    # ranked pool: FP at 0.9 then TP at 0.6 -> AP = 0.5 * 0.5
    assert abs(report.per_class_ap[0] - 0.25) < 1e-12


def test_map_monotone_in_iou_threshold(rng):
    per_image = []
    for _ in range(20):
        gts = [box(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.1, 0.3, 2),
                   cls=int(rng.integers(3)))]
        jit = rng.uniform(-0.05, 0.05, 2)
        dets = [d(box(gts[0].cx + jit[0], gts[0].cy + jit[1], gts[0].w, gts[0].h,
                      cls=gts[0].class_id), float(rng.uniform(0.3, 1.0)))]
        per_image.append((dets, gts))
    maps = [ev.evaluate_detections(per_image, 3, iou_threshold=t).map
            for t in (0.3, 0.5, 0.7, 0.9)]
    assert all(a >= b for a, b in zip(maps, maps[1:]))


def test_report_csv_format(tmp_path):
    report = ev.evaluate_detections(
        [([d(box(0.3, 0.3, 0.2, 0.2), 0.9)], [box(0.3, 0.3, 0.2, 0.2)])],
        num_classes=2)
    path = tmp_path / "r.csv"
    report.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "class,AP,n_gt,n_det,tp,fp"
    assert lines[1] == "0,1.000000,1,1,1,0"
    assert lines[-1].startswith("mAP,1.000000")
