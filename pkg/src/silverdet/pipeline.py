"""Two-phase semi-supervised training with confidence-weighted loss.

Phase 1 trains a teacher detector on the gold set; the teacher labels an
unlabeled pool to form the silver set; classifier scores attach a weight
alpha to each pseudo-box; phase 2 trains a student whose per-box losses
are scaled by alpha. A sweep harness runs grids of (gold size, combiner,
init mode, seed) and emits one result row per point.
"""

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import detector, evaluation, numerics as nm, scoring, synthdata
from .detector import DetectorConfig, TrainConfig
from .scoring import ClassifierTrainConfig
from .synthdata import (Dataset, DatasetItem, ROLE_GOLD, ROLE_SILVER,
                        ROLE_UNLABELED, SceneSpec, ScoredAnnotation, derive_seed)

INIT_MODES = ("reinit", "bootstrap")
IMBALANCE_CAP = 1.5   # per-class annotation cap: 1.5x the median class count


@dataclass
class PipelineConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    teacher: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=30))
    student: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=12, alpha_weighting="on", noobj_alpha="mean"))
    classifier: ClassifierTrainConfig = field(default_factory=ClassifierTrainConfig)
    init: str = "bootstrap"
    combiner: str = "max"
    seed: int = 0


@dataclass
class ExperimentGrid:
    gold_sizes: list                 # images per class
    combiners: list
    inits: list
    seeds: list
    gold_fractions: list = field(default_factory=lambda: [1.0])
    unlabeled_factor: float = 8.0
    test_size: int = 128

    def __post_init__(self):
        for name in ("gold_sizes", "combiners", "inits", "seeds", "gold_fractions"):
            if not getattr(self, name):
                raise ValueError(f"experiment grid axis '{name}' is empty")


def train_teacher(gold, det_cfg, train_cfg):
    if gold.role != ROLE_GOLD:
        raise ValueError(f"teacher expects a gold dataset, got role '{gold.role}'")
    cfg = replace(train_cfg, alpha_weighting="off")
    params = detector.build_detector(det_cfg, cfg.seed)
    return detector.train_detector(params, gold, det_cfg, cfg)


def generate_silver(teacher_params, unlabeled, det_cfg):
    """Pseudo-label the unlabeled pool: decode, threshold, NMS, rebalance.

    Images with no surviving detection are excluded. Returns the silver
    dataset (alpha left at the 0 sentinel) and counters {blank, capped}.
    """
    if unlabeled.role != ROLE_UNLABELED:
        raise ValueError(f"expected an unlabeled dataset, got role '{unlabeled.role}'")
    raw = []
    for start in range(0, len(unlabeled.items), 32):
        chunk = unlabeled.items[start:start + 32]
        x = nm.Tensor(np.stack([detector.nm_image(it.image) for it in chunk]))
        out = detector.forward(teacher_params, x, det_cfg)
        for k, item in enumerate(chunk):
            dets = detector.nms(detector.decode(out.data[k], det_cfg),
                                det_cfg.nms_iou_threshold)
            raw.append((item, dets))

    # cap each class at IMBALANCE_CAP x the median class count,
    # dropping the lowest-confidence extras
    counts = {}
    for _, dets in raw:
        for d in dets:
            counts[d.annotation.class_id] = counts.get(d.annotation.class_id, 0) + 1
    capped = 0
    keep_flags = {}
    if counts:
        cap = int(np.ceil(IMBALANCE_CAP * np.median(list(counts.values()))))
        ranked = sorted(
            ((item.stem, k, d) for item, dets in raw for k, d in enumerate(dets)),
            key=lambda t: -t[2].confidence)
        taken = {}
        for stem, k, d in ranked:
            c = d.annotation.class_id
            if taken.get(c, 0) < cap:
                taken[c] = taken.get(c, 0) + 1
                keep_flags[(stem, k)] = True
            else:
                capped += 1

    items = []
    blank = 0
    for item, dets in raw:
        anns = [ScoredAnnotation(d.annotation, 0.0, d.confidence)
                for k, d in enumerate(dets) if keep_flags.get((item.stem, k))]
        if not anns:
            blank += 1
            continue
        items.append(DatasetItem(item.stem, item.image, anns))
    silver = Dataset(role=ROLE_SILVER, items=items,
                     class_names=unlabeled.class_names, seed=unlabeled.seed)
    return silver, {"blank": blank, "capped": capped}


def attach_scores(silver, ensemble, combiner):
    """Fill alpha for every silver annotation; idempotent."""
    if silver.role != ROLE_SILVER:
        raise ValueError(f"expected a silver dataset, got role '{silver.role}'")
    if combiner != "const1" and ensemble is None:
        raise ValueError("classifier ensemble required for combiner " + combiner)

    if combiner == "const1":
        items = [DatasetItem(item.stem, item.image,
                             [ScoredAnnotation(sa.annotation, 1.0,
                                               sa.detector_confidence)
                              for sa in item.annotations])
                 for item in silver.items]
        return Dataset(role=ROLE_SILVER, items=items,
                       class_names=silver.class_names, seed=silver.seed)

    crops, class_ids = [], []
    for item in silver.items:
        for sa in item.annotations:
            crops.append(synthdata.crop_resize(item.image, sa.annotation,
                                               ensemble.crop_size))
            class_ids.append(sa.annotation.class_id)
    scores = scoring.batch_classifier_scores(ensemble, crops, class_ids)
    items = []
    pos = 0
    for item in silver.items:
        anns = []
        for sa in item.annotations:
            if not 0.0 <= sa.detector_confidence <= 1.0:
                raise ValueError(
                    f"detector confidence out of [0,1]: {sa.detector_confidence}")
            alpha = scoring.combine(scores[pos], sa.detector_confidence, combiner)
            anns.append(ScoredAnnotation(sa.annotation, alpha,
                                         sa.detector_confidence))
            pos += 1
        items.append(DatasetItem(item.stem, item.image, anns))
    return Dataset(role=ROLE_SILVER, items=items,
                   class_names=silver.class_names, seed=silver.seed)


def weighted_loss(output, targets, det_cfg, noobj_alpha="mean"):
    """Five-term loss with each box's terms scaled by its alpha weight."""
    return detector.grid_loss(output, targets, det_cfg,
                              use_alpha=True, noobj_alpha=noobj_alpha)


def train_student(silver, init, teacher_params, det_cfg, train_cfg):
    if init not in INIT_MODES:
        raise ValueError(f"init must be one of {INIT_MODES}, got '{init}'")
    if init == "bootstrap":
        if teacher_params is None:
            raise ValueError("bootstrap init requires the teacher checkpoint")
        params = detector.clone_params(teacher_params)
    else:
        params = detector.build_detector(det_cfg, train_cfg.seed)
    return detector.train_detector(params, silver, det_cfg, train_cfg)


def silver_audit(silver, hidden_truth):
    """Mean IoU of silver boxes against the hidden ground truth sidecar."""
    ious = []
    for item in silver.items:
        truth = hidden_truth.get(item.stem, [])
        for sa in item.annotations:
            best = 0.0
            for gt in truth:
                if gt.class_id == sa.annotation.class_id:
                    best = max(best, evaluation.iou(sa.annotation, gt))
            ious.append(best)
    return float(np.mean(ious)) if ious else 0.0


def mean_silver_alpha(silver):
    alphas = [sa.alpha for item in silver.items for sa in item.annotations]
    return float(np.mean(alphas)) if alphas else 0.0


# ---------------------------------------------------------------------------
# experiment harness

def result_header(n_classes=5, audit=False):
    head = ("gold_size,gold_fraction,combiner,init,seed," +
            ",".join(f"AP_class{i}" for i in range(n_classes)) +
            ",mAP,silver_count,mean_alpha")
    return head + ",silver_mean_iou" if audit else head


def _result_row(gold_size, fraction, combiner, init, seed, report, n_classes,
                silver_count, mean_alpha, silver_iou=None):
    aps = ",".join(f"{report.per_class_ap.get(c, 0.0):.6f}" for c in range(n_classes))
    row = (f"{gold_size},{fraction:g},{combiner},{init},{seed},{aps},"
           f"{report.map:.6f},{silver_count},{mean_alpha:.6f}")
    if silver_iou is not None:
        row += f",{silver_iou:.6f}"
    return row


def run_grid_point(spec, cfg, gold_size, fraction, combiner, init, seed,
                   unlabeled_factor=8.0, test_size=128, audit=False):
    """One full pipeline run; returns (result row, control row, info dict)."""
    n_classes = spec.num_classes
    total_gold = gold_size * n_classes
    n_gold = max(1, int(round(total_gold * fraction)))
    n_unlabeled = int(round(total_gold * unlabeled_factor)) + (total_gold - n_gold)
    sizes = {"gold": n_gold, "unlabeled": n_unlabeled, "test": test_size}
    data_seed = derive_seed(seed, "data", gold_size, f"{fraction:g}")
    gold, unlabeled, test = synthdata.generate_splits(spec, sizes, data_seed)

    det_cfg = cfg.detector
    teacher_cfg = replace(cfg.teacher, seed=derive_seed(seed, "teacher"))
    teacher, _ = train_teacher(gold, det_cfg, teacher_cfg)
    teacher_report = evaluation.evaluate(teacher, test, det_cfg)

    silver, counters = generate_silver(teacher, unlabeled, det_cfg)
    silver_iou = silver_audit(silver, unlabeled.hidden_truth) if audit else None
    info = {"teacher_map": teacher_report.map, "silver_count": len(silver.items),
            **counters}
    if audit:
        info["silver_iou"] = silver_iou
    control = _result_row(gold_size, fraction, "none", "teacher", seed,
                          teacher_report, n_classes, len(silver.items), 0.0,
                          silver_iou)
    if not silver.items:
        return None, control, info

    ensemble = None
    if combiner != "const1":
        clf_cfg = replace(cfg.classifier, seed=derive_seed(seed, "classifiers"))
        ensemble = scoring.train_classifiers(gold, cfg.classifier.crop_size, clf_cfg)
    scored = attach_scores(silver, ensemble, combiner)

    student_cfg = replace(cfg.student, seed=derive_seed(seed, "student"),
                          alpha_weighting="on")
    student, _ = train_student(scored, init, teacher, det_cfg, student_cfg)
    report = evaluation.evaluate(student, test, det_cfg)
    row = _result_row(gold_size, fraction, combiner, init, seed, report,
                      n_classes, len(scored.items), mean_silver_alpha(scored),
                      silver_iou)
    info["student_map"] = report.map
    return row, control, info


def _point_task(payload):
    spec, cfg, point, unlabeled_factor, test_size, audit = payload
    gold_size, fraction, combiner, init, seed = point
    try:
        row, control, info = run_grid_point(
            spec, cfg, gold_size, fraction, combiner, init, seed,
            unlabeled_factor, test_size, audit)
        return point, row, control, info, None
    except Exception as exc:
        return point, None, None, {}, str(exc)


def run_experiment(grid, cfg, spec=None, out_path=None, log=None, jobs=1,
                   audit=False):
    """Run every grid point; failures are recorded and the run continues.

    Grid points are independent; with jobs > 1 they run on a process pool
    and results merge back in grid order.
    """
    spec = spec or SceneSpec()
    points = [(gs, fr, cb, init, seed)
              for gs in grid.gold_sizes
              for fr in grid.gold_fractions
              for cb in grid.combiners
              for init in grid.inits
              for seed in grid.seeds]
    payloads = [(spec, cfg, p, grid.unlabeled_factor, grid.test_size, audit)
                for p in points]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_point_task, payloads))
    else:
        results = [_point_task(p) for p in payloads]

    rows = [result_header(spec.num_classes, audit)]
    controls_done = set()
    for point, row, control, info, error in results:
        gold_size, fraction, combiner, init, seed = point
        if error is not None:
            rows.append(f"{gold_size},{fraction:g},{combiner},{init},{seed},"
                        f"ERROR: {error}")
            continue
        ckey = (gold_size, fraction, seed)
        if ckey not in controls_done:
            controls_done.add(ckey)
            rows.append(control)
        if row is not None:
            rows.append(row)
        if log is not None:
            log(f"point gold_size={gold_size} fraction={fraction:g} "
                f"combiner={combiner} init={init} seed={seed} "
                + " ".join(f"{k}={v}" for k, v in info.items()))
    table = "\n".join(rows) + "\n"
    if out_path:
        os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
        with open(out_path, "w") as f:
            f.write(table)
    return table
