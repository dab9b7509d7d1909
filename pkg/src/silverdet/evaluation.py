"""Detection-quality metrics: IoU, per-class average precision, mAP."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class EvalReport:
    per_class_ap: dict
    map: float
    counts: dict = field(default_factory=dict)   # class -> {gt, detections, tp, fp}
    iou_threshold: float = 0.5

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write("class,AP,n_gt,n_det,tp,fp\n")
            for cls in sorted(self.counts):
                c = self.counts[cls]
                ap = self.per_class_ap.get(cls, float("nan"))
                f.write(f"{cls},{ap:.6f},{c['gt']},{c['detections']},{c['tp']},{c['fp']}\n")
            f.write(f"mAP,{self.map:.6f},,,,\n")


def iou(a, b):
    """Intersection over union of two center/size normalized boxes."""
    ax0, ax1 = a.cx - a.w / 2, a.cx + a.w / 2
    ay0, ay1 = a.cy - a.h / 2, a.cy + a.h / 2
    bx0, bx1 = b.cx - b.w / 2, b.cx + b.w / 2
    by0, by1 = b.cy - b.h / 2, b.cy + b.h / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def match_detections(dets, gts, iou_threshold=0.5):
    """Greedy TP/FP flags for one image and one class.

    Detections must be pre-sorted by descending confidence. Each ground
    truth matches at most one detection; a detection is TP when its
    best-IoU unmatched ground truth reaches the threshold. Equal IoUs
    resolve to the lower ground-truth index.
    """
    matched = [False] * len(gts)
    flags = []
    for det in dets:
        best_iou = -1.0
        best_g = -1
        for g, gt in enumerate(gts):
            if matched[g]:
                continue
            v = iou(det.annotation, gt)
            if v > best_iou:
                best_iou = v
                best_g = g
        if best_g >= 0 and best_iou >= iou_threshold:
            matched[best_g] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags, confidences, n_gt):
    """All-points interpolated AP from pooled TP/FP flags of one class."""
    if n_gt < 0:
        raise ValueError("n_gt must be >= 0")
    if n_gt == 0:
        return None  # class excluded from mAP
    if not flags:
        return 0.0
    order = np.argsort(-np.asarray(confidences, dtype=np.float64), kind="stable")
    tp = np.cumsum([bool(flags[i]) for i in order]).astype(np.float64)
    fp = np.cumsum([not flags[i] for i in order]).astype(np.float64)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # interpolate: precision at recall >= r is the running max from the right
    mrec = np.concatenate(([0.0], recall, [recall[-1]]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))


def evaluate_detections(per_image, num_classes, iou_threshold=0.5):
    """EvalReport from per-image (detections, ground truths) pairs."""
    flags = {c: [] for c in range(num_classes)}
    confs = {c: [] for c in range(num_classes)}
    n_gt = {c: 0 for c in range(num_classes)}
    for dets, gts in per_image:
        for c in range(num_classes):
            cls_gts = [g for g in gts if g.class_id == c]
            n_gt[c] += len(cls_gts)
            cls_dets = sorted(
                (d for d in dets if d.annotation.class_id == c),
                key=lambda d: -d.confidence)
            f = match_detections(cls_dets, cls_gts, iou_threshold)
            flags[c].extend(f)
            confs[c].extend(d.confidence for d in cls_dets)

    per_class_ap = {}
    counts = {}
    for c in range(num_classes):
        ap = average_precision(flags[c], confs[c], n_gt[c])
        counts[c] = {
            "gt": n_gt[c],
            "detections": len(flags[c]),
            "tp": int(sum(flags[c])),
            "fp": int(len(flags[c]) - sum(flags[c])),
        }
        if ap is not None:
            per_class_ap[c] = ap
    mean = float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0
    return EvalReport(per_class_ap, mean, counts, iou_threshold)


def evaluate(params, test_ds, config, iou_threshold=0.5, batch_size=32):
    """Run the detector over a test dataset and compute per-class AP and mAP."""
    from . import detector, numerics as nm

    if len(test_ds.items) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    per_image = []
    items = test_ds.items
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        x = nm.Tensor(np.stack([detector.nm_image(it.image) for it in chunk]))
        out = detector.forward(params, x, config)
        for k, it in enumerate(chunk):
            dets = detector.nms(detector.decode(out.data[k], config),
                                config.nms_iou_threshold)
            gts = [a.annotation if hasattr(a, "annotation") else a
                   for a in it.annotations]
            per_image.append((dets, gts))
    return evaluate_detections(per_image, config.c, iou_threshold)
