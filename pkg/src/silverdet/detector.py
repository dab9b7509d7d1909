"""Grid-based single-shot detector.

A fixed small CNN backbone predicts, for each cell of an SxS grid, B
boxes (x, y, w, h, confidence) plus C class probabilities. Training
minimizes the five-term squared-error loss (centre, box, object, no-obj,
class score); inference decodes the grid with a confidence threshold and
applies classwise greedy NMS.
"""

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .synthdata import Annotation, ScoredAnnotation

BACKBONE_WIDTHS = (16, 32, 64, 64)
N_POOLS = len(BACKBONE_WIDTHS)


@dataclass
class DetectorConfig:
    s: int = 4                     # grid size
    b: int = 2                     # boxes per cell
    c: int = 5                     # classes
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5
    input_size: int = 64
    conf_threshold: float = 0.25
    nms_iou_threshold: float = 0.45
    conf_target: str = "one"       # one | iou

    def __post_init__(self):
        if self.s < 1 or self.b < 1 or self.c < 1:
            raise ValueError("S, B, C must all be >= 1")
        if self.lambda_coord <= 0 or self.lambda_noobj < 0:
            raise ValueError("lambda_coord must be > 0 and lambda_noobj >= 0")
        if self.conf_target not in ("one", "iou"):
            raise ValueError(f"conf_target must be 'one' or 'iou', got {self.conf_target}")

    @property
    def channels(self):
        return self.b * 5 + self.c


@dataclass
class Detection:
    annotation: Annotation
    confidence: float
    class_prob: float


@dataclass
class TargetGrid:
    """Per-image training targets for one SxS grid."""
    obj_mask: np.ndarray       # [S,S,B]
    noobj_mask: np.ndarray     # [S,S,B]
    txy: np.ndarray            # [S,S,B,2] cell-relative offsets in [0,1)
    twh: np.ndarray            # [S,S,B,2] image-relative sizes
    conf: np.ndarray           # [S,S,B] confidence targets
    class_onehot: np.ndarray   # [S,S,C]
    cell_mask: np.ndarray      # [S,S]
    alpha_box: np.ndarray      # [S,S,B] per-responsible-box weight
    alpha_cell: np.ndarray     # [S,S] weight of the class term
    dropped: int = 0
    n_boxes: int = 0

    @property
    def mean_alpha(self):
        if self.n_boxes == 0:
            return 1.0
        return float(self.alpha_box[self.obj_mask > 0].mean())


@dataclass
class LossBreakdown:
    centre: object
    box: object
    object_: object
    noobj: object
    score: object
    total: object

    def values(self):
        return {
            "centre": float(self.centre.data),
            "box": float(self.box.data),
            "object": float(self.object_.data),
            "noobj": float(self.noobj.data),
            "score": float(self.score.data),
            "total": float(self.total.data),
        }


@dataclass
class TrainConfig:
    lr: float = 0.02
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    alpha_weighting: str = "off"   # off | on
    noobj_alpha: str = "one"       # one | mean


# ---------------------------------------------------------------------------
# model

def build_detector(config, seed):
    """He-initialized backbone + two 1x1 heads; deterministic per seed."""
    if config.input_size % (2 ** N_POOLS) or config.input_size // (2 ** N_POOLS) != config.s:
        raise ValueError(
            f"input size {config.input_size} does not reduce to a "
            f"{config.s}x{config.s} grid after {N_POOLS} poolings")
    rng = np.random.default_rng(seed)
    params = {}
    cin = 3
    for i, cout in enumerate(BACKBONE_WIDTHS):
        fan_in = cin * 9
        params[f"conv{i}.w"] = nm.Tensor(
            (rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / fan_in)).astype(np.float32),
            requires_grad=True)
        params[f"conv{i}.b"] = nm.Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
        cin = cout
    for name, cout in (("head_box", config.b * 5), ("head_cls", config.c)):
        params[f"{name}.w"] = nm.Tensor(
            (rng.standard_normal((cout, cin, 1, 1)) * np.sqrt(2.0 / cin)).astype(np.float32),
            requires_grad=True)
        params[f"{name}.b"] = nm.Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
    return params


def clone_params(params):
    return {k: nm.Tensor(t.data.copy(), requires_grad=True) for k, t in params.items()}


def forward(params, x, config):
    """Activated prediction grid [*, 5B+C, S, S] for input [*, 3, H, W]."""
    h = x
    for i in range(len(BACKBONE_WIDTHS)):
        h = nm.maxpool2(nm.leaky_relu(
            nm.conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"], stride=1, pad=1)))
    box = nm.sigmoid(nm.conv2d(h, params["head_box.w"], params["head_box.b"]))
    cls_axis = 0 if x.data.ndim == 3 else 1
    cls = nm.softmax(nm.conv2d(h, params["head_cls.w"], params["head_cls.b"]), axis=cls_axis)
    return nm.concat([box, cls], axis=cls_axis)


# ---------------------------------------------------------------------------
# target assignment

def grid_boxes(grid_data, config):
    """Absolute normalized (cx, cy, w, h) per predictor from a raw grid [ch,S,S]."""
    s, b = config.s, config.b
    boxes = np.empty((s, s, b, 4), dtype=np.float64)
    cols = np.arange(s)[None, :, None]
    rows = np.arange(s)[:, None, None]
    for j in range(b):
        boxes[..., j, 0] = (cols[..., 0] + grid_data[5 * j]) / s
        boxes[..., j, 1] = (rows[..., 0] + grid_data[5 * j + 1]) / s
        boxes[..., j, 2] = grid_data[5 * j + 2]
        boxes[..., j, 3] = grid_data[5 * j + 3]
    return boxes


def _iou_cxcywh(a, b):
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by0, by1 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def assign_targets(gt, config, pred_grid=None, alphas=None):
    """Assign ground-truth boxes to grid cells and responsible predictors.

    `pred_grid` (raw activated grid [ch,S,S]) selects the responsible
    predictor by IoU argmax at training time; without it predictor slots
    are filled in order. `alphas` supplies per-box loss weights (default 1).
    """
    s, b, c = config.s, config.b, config.c
    tg = TargetGrid(
        obj_mask=np.zeros((s, s, b), dtype=np.float32),
        noobj_mask=np.ones((s, s, b), dtype=np.float32),
        txy=np.zeros((s, s, b, 2), dtype=np.float32),
        twh=np.zeros((s, s, b, 2), dtype=np.float32),
        conf=np.zeros((s, s, b), dtype=np.float32),
        class_onehot=np.zeros((s, s, c), dtype=np.float32),
        cell_mask=np.zeros((s, s), dtype=np.float32),
        alpha_box=np.ones((s, s, b), dtype=np.float32),
        alpha_cell=np.ones((s, s), dtype=np.float32),
    )
    if alphas is None:
        alphas = [1.0] * len(gt)
    pred_boxes = grid_boxes(pred_grid, config) if pred_grid is not None else None

    by_cell = {}
    for i, ann in enumerate(gt):
        ann.validate()
        col = min(int(ann.cx * s), s - 1)
        row = min(int(ann.cy * s), s - 1)
        by_cell.setdefault((row, col), []).append(i)

    for (row, col), idxs in sorted(by_cell.items()):
        idxs = sorted(idxs, key=lambda i: -gt[i].w * gt[i].h)
        kept, extra = idxs[:b], idxs[b:]
        tg.dropped += len(extra)
        free = list(range(b))
        for i in kept:
            ann = gt[i]
            if pred_boxes is None:
                j = free[0]
                iou_j = 0.0
            else:
                target = (ann.cx, ann.cy, ann.w, ann.h)
                ious = [_iou_cxcywh(pred_boxes[row, col, jj], target) for jj in free]
                best = int(np.argmax(ious))  # ties: lowest predictor index
                j = free[best]
                iou_j = ious[best]
            free.remove(j)
            tg.obj_mask[row, col, j] = 1.0
            tg.noobj_mask[row, col, j] = 0.0
            tg.txy[row, col, j] = (ann.cx * s - col, ann.cy * s - row)
            tg.twh[row, col, j] = (ann.w, ann.h)
            tg.conf[row, col, j] = 1.0 if config.conf_target == "one" else iou_j
            tg.alpha_box[row, col, j] = alphas[i]
            tg.n_boxes += 1
        largest = kept[0]
        tg.class_onehot[row, col, gt[largest].class_id] = 1.0
        tg.cell_mask[row, col] = 1.0
        tg.alpha_cell[row, col] = alphas[largest]
    return tg


# ---------------------------------------------------------------------------
# loss

def _loss_arrays(tg, config, noobj_weight):
    """Per-channel weight/target arrays [ch,S,S] for the masked squared loss."""
    s, b, c, ch = config.s, config.b, config.c, config.channels
    w_centre = np.zeros((ch, s, s), dtype=np.float32)
    w_box = np.zeros((ch, s, s), dtype=np.float32)
    w_obj = np.zeros((ch, s, s), dtype=np.float32)
    w_noobj = np.zeros((ch, s, s), dtype=np.float32)
    w_score = np.zeros((ch, s, s), dtype=np.float32)
    t_lin = np.zeros((ch, s, s), dtype=np.float32)
    t_sqrt = np.zeros((ch, s, s), dtype=np.float32)

    obj_a = np.transpose(tg.obj_mask * tg.alpha_box, (2, 0, 1))       # [B,S,S]
    noobj = np.transpose(tg.noobj_mask, (2, 0, 1))
    for j in range(b):
        w_centre[5 * j:5 * j + 2] = config.lambda_coord * obj_a[j]
        w_box[5 * j + 2:5 * j + 4] = config.lambda_coord * obj_a[j]
        w_obj[5 * j + 4] = obj_a[j]
        w_noobj[5 * j + 4] = config.lambda_noobj * noobj_weight * noobj[j]
        t_lin[5 * j:5 * j + 2] = np.transpose(tg.txy[:, :, j], (2, 0, 1))
        t_lin[5 * j + 4] = tg.conf[:, :, j]
        t_sqrt[5 * j + 2:5 * j + 4] = np.sqrt(np.transpose(tg.twh[:, :, j], (2, 0, 1)))
    w_score[5 * b:] = (tg.cell_mask * tg.alpha_cell)[None]
    t_lin[5 * b:] = np.transpose(tg.class_onehot, (2, 0, 1))
    return w_centre, w_box, w_obj, w_noobj, w_score, t_lin, t_sqrt


def grid_loss(output, targets, config, use_alpha=False, noobj_alpha="one"):
    """Five-term loss for a single grid [ch,S,S] or a batch [N,ch,S,S].

    With `use_alpha` the per-box weights stored in the target grids apply
    (and `noobj_alpha` = "mean" weights each image's background term by the
    mean of its box weights); otherwise all weights are exactly 1.
    """
    single = output.data.ndim == 3
    target_list = [targets] if single else list(targets)
    stacks = [[] for _ in range(7)]
    for tg in target_list:
        work = tg if use_alpha else _strip_alpha(tg)
        if use_alpha:
            bad = work.alpha_box[(work.alpha_box < 0) | (work.alpha_box > 1)]
            if bad.size:
                raise ValueError(f"alpha outside [0,1]: {bad[0]}")
        nw = work.mean_alpha if (use_alpha and noobj_alpha == "mean") else 1.0
        for dst, arr in zip(stacks, _loss_arrays(work, config, nw)):
            dst.append(arr)
    axis_stack = (lambda a: a[0]) if single else np.stack
    w_centre, w_box, w_obj, w_noobj, w_score, t_lin, t_sqrt = (
        axis_stack(s) for s in stacks)

    diff_lin = nm.sub(output, t_lin)
    sq_lin = nm.square(diff_lin)
    sq_sqrt = nm.square(nm.sub(nm.sqrt(output), t_sqrt))
    centre = nm.tsum(nm.mul(sq_lin, w_centre))
    box = nm.tsum(nm.mul(sq_sqrt, w_box))
    obj = nm.tsum(nm.mul(sq_lin, w_obj))
    noobj = nm.tsum(nm.mul(sq_lin, w_noobj))
    score = nm.tsum(nm.mul(sq_lin, w_score))
    total = nm.add(nm.add(nm.add(nm.add(centre, box), obj), noobj), score)
    return LossBreakdown(centre, box, obj, noobj, score, total)


def _strip_alpha(tg):
    from dataclasses import replace
    return replace(tg,
                   alpha_box=np.ones_like(tg.alpha_box),
                   alpha_cell=np.ones_like(tg.alpha_cell))


def yolo_loss(output, targets, config):
    """Unweighted five-term loss (all box weights exactly 1)."""
    return grid_loss(output, targets, config, use_alpha=False)


# ---------------------------------------------------------------------------
# decoding and NMS

def decode(grid_data, config):
    """Detections above the confidence threshold from an activated grid [ch,S,S]."""
    s, b = config.s, config.b
    cls_probs = grid_data[5 * b:]
    dets = []
    for row in range(s):
        for col in range(s):
            probs = cls_probs[:, row, col]
            class_id = int(np.argmax(probs))
            class_prob = float(probs[class_id])
            for j in range(b):
                conf = float(grid_data[5 * j + 4, row, col])
                confidence = conf * class_prob
                if confidence < config.conf_threshold:
                    continue
                ann = Annotation(
                    class_id,
                    (col + float(grid_data[5 * j, row, col])) / s,
                    (row + float(grid_data[5 * j + 1, row, col])) / s,
                    float(grid_data[5 * j + 2, row, col]),
                    float(grid_data[5 * j + 3, row, col]),
                )
                dets.append(Detection(ann, confidence, class_prob))
    return dets


def nms(dets, iou_threshold):
    """Classwise greedy suppression; ties in confidence keep input order."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept = []
    for i in order:
        a = dets[i].annotation
        ok = True
        for k in kept:
            ka = k.annotation
            if ka.class_id == a.class_id and _iou_cxcywh(
                    (a.cx, a.cy, a.w, a.h), (ka.cx, ka.cy, ka.w, ka.h)) >= iou_threshold:
                ok = False
                break
        if ok:
            kept.append(dets[i])
    return kept


def detect_image(params, image, config):
    """decode + NMS for one uint8 image [3,H,W]."""
    x = nm.Tensor(image.astype(np.float32) / 255.0)
    out = forward(params, x, config)
    return nms(decode(out.data, config), config.nms_iou_threshold)


# ---------------------------------------------------------------------------
# training

def _item_boxes(item, use_alpha):
    anns, alphas = [], []
    for a in item.annotations:
        if isinstance(a, ScoredAnnotation):
            anns.append(a.annotation)
            alphas.append(a.alpha if use_alpha else 1.0)
        else:
            anns.append(a)
            alphas.append(1.0)
    return anns, alphas


def train_detector(params, dataset, config, train_cfg):
    """Mini-batch momentum SGD over the grid loss; returns per-epoch history."""
    if len(dataset.items) == 0:
        raise ValueError("cannot train on an empty dataset")
    use_alpha = train_cfg.alpha_weighting == "on"
    images = [nm_image(item.image) for item in dataset.items]
    boxes = [_item_boxes(item, use_alpha) for item in dataset.items]

    opt = nm.SGD(params, lr=max(train_cfg.lr, 1e-30), momentum=train_cfg.momentum)
    rng = np.random.default_rng(train_cfg.seed)
    history = []
    n = len(images)
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n)
        sums = {k: 0.0 for k in ("centre", "box", "object", "noobj", "score", "total")}
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            x = nm.Tensor(np.stack([images[i] for i in idx]))
            out = forward(params, x, config)
            tgs = [assign_targets(boxes[i][0], config,
                                  pred_grid=out.data[k], alphas=boxes[i][1])
                   for k, i in enumerate(idx)]
            lb = grid_loss(out, tgs, config, use_alpha=use_alpha,
                           noobj_alpha=train_cfg.noobj_alpha)
            loss = nm.mul(lb.total, 1.0 / len(idx))
            opt.zero_grad()
            nm.backward(loss)
            if train_cfg.lr > 0:
                opt.step()
            for k, v in lb.values().items():
                sums[k] += v
        history.append({"epoch": epoch, **{k: v / n for k, v in sums.items()}})
    return params, history


def nm_image(image):
    return image.astype(np.float32) / 255.0


def write_loss_history(history, path):
    with open(path, "w") as f:
        f.write("epoch,centre,box,object,noobj,score,total\n")
        for row in history:
            f.write("{epoch},{centre:.8f},{box:.8f},{object:.8f},"
                    "{noobj:.8f},{score:.8f},{total:.8f}\n".format(**row))


def parameter_count(config):
    total = 0
    cin = 3
    for cout in BACKBONE_WIDTHS:
        total += cout * cin * 9 + cout
        cin = cout
    total += (config.b * 5) * cin + config.b * 5
    total += config.c * cin + config.c
    return total
