"""Confidence metric from a small classifier ensemble.

Four independent CNN classifiers (diversified by seed and channel-width
jitter) score each pseudo-box crop with the probability of the pseudo
label's class. Combiners map the four scores, optionally together with
the detector's own confidence, to a single weight alpha in [0, 1].
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .synthdata import crop_resize

BASE_WIDTHS = (8, 16, 32)
WIDTH_JITTER = (1.0, 1.25, 0.75, 1.5)
ENSEMBLE_SIZE = len(WIDTH_JITTER)

COMBINERS = ("const1", "clf0", "clf1", "clf2", "clf3", "avg", "max", "maxdet")


@dataclass
class ClassifierTrainConfig:
    crop_size: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 32
    holdout_fraction: float = 0.2
    seed: int = 0


@dataclass
class ClassifierEnsemble:
    members: list                    # list of param dicts
    crop_size: int
    num_classes: int
    holdout_accuracy: list = field(default_factory=list)


def _widths(factor):
    return tuple(max(4, int(round(w * factor))) for w in BASE_WIDTHS)


def build_classifier(num_classes, width_factor, crop_size, seed):
    if crop_size % 8:
        raise ValueError(f"crop size must be divisible by 8, got {crop_size}")
    rng = np.random.default_rng(seed)
    params = {}
    cin = 3
    for i, cout in enumerate(_widths(width_factor)):
        fan_in = cin * 9
        params[f"conv{i}.w"] = nm.Tensor(
            (rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / fan_in)).astype(np.float32),
            requires_grad=True)
        params[f"conv{i}.b"] = nm.Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
        cin = cout
    feat = cin * (crop_size // 8) ** 2
    params["fc.w"] = nm.Tensor(
        (rng.standard_normal((num_classes, feat)) * np.sqrt(2.0 / feat)).astype(np.float32),
        requires_grad=True)
    params["fc.b"] = nm.Tensor(np.zeros(num_classes, dtype=np.float32), requires_grad=True)
    return params


def classifier_forward(params, x):
    """Class probabilities [N,C] (or [C]) for float crops [*,3,h,h] in [0,1]."""
    h = x
    n_conv = sum(1 for k in params if k.endswith(".w") and k.startswith("conv"))
    for i in range(n_conv):
        h = nm.maxpool2(nm.leaky_relu(
            nm.conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"], stride=1, pad=1)))
    if x.data.ndim == 4:
        h = nm.reshape(h, (h.data.shape[0], -1))
    else:
        h = nm.reshape(h, (-1,))
    return nm.softmax(nm.dense(h, params["fc.w"], params["fc.b"]), axis=-1)


def classify(params, crop):
    """Probability vector for one uint8 crop [3,h,h]."""
    expected = int(np.sqrt(params["fc.w"].data.shape[1] //
                           params[f"conv{_last_conv(params)}.w"].data.shape[0])) * 8
    if crop.shape[1] != expected or crop.shape[2] != expected:
        raise ValueError(
            f"classify: crop is {crop.shape[1]}x{crop.shape[2]}, expected {expected}x{expected}")
    x = nm.Tensor(crop.astype(np.float32) / 255.0)
    return classifier_forward(params, x).data


def _last_conv(params):
    return max(int(k[4]) for k in params if k.startswith("conv") and k.endswith(".w"))


def _cross_entropy(probs, labels_onehot):
    picked = nm.mul(nm.log(probs), labels_onehot)
    return nm.mul(nm.tsum(picked), -1.0 / labels_onehot.shape[0])


def _gold_crops(gold, crop_size):
    crops, labels = [], []
    for item in gold.items:
        for ann in item.annotations:
            a = ann.annotation if hasattr(ann, "annotation") else ann
            crops.append(crop_resize(item.image, a, crop_size))
            labels.append(a.class_id)
    return crops, labels


def train_classifiers(gold, crop_size, cfg):
    """Train the four-member ensemble on gold crops with cross-entropy."""
    num_classes = len(gold.class_names)
    crops, labels = _gold_crops(gold, crop_size)
    present = set(labels)
    missing = [c for c in range(num_classes) if c not in present]
    if missing:
        raise ValueError(f"no gold crops for class(es) {missing}")

    x_all = np.stack([c.astype(np.float32) / 255.0 for c in crops])
    y_all = np.asarray(labels)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(crops))
    n_hold = max(1, int(len(crops) * cfg.holdout_fraction))
    hold, train = order[:n_hold], order[n_hold:]

    ensemble = ClassifierEnsemble([], crop_size, num_classes)
    for k, factor in enumerate(WIDTH_JITTER):
        member_seed = int(rng.integers(2 ** 63))
        params = build_classifier(num_classes, factor, crop_size, member_seed)
        _fit_classifier(params, x_all[train], y_all[train], num_classes, cfg,
                        seed=member_seed + 1)
        acc = _accuracy(params, x_all[hold], y_all[hold], cfg.batch_size)
        ensemble.members.append(params)
        ensemble.holdout_accuracy.append(acc)
    return ensemble


def _fit_classifier(params, x, y, num_classes, cfg, seed):
    opt = nm.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    rng = np.random.default_rng(seed)
    onehot = np.zeros((len(y), num_classes), dtype=np.float32)
    onehot[np.arange(len(y)), y] = 1.0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            probs = classifier_forward(params, nm.Tensor(x[idx]))
            loss = _cross_entropy(probs, onehot[idx])
            opt.zero_grad()
            nm.backward(loss)
            opt.step()


def _accuracy(params, x, y, batch_size):
    hits = 0
    for start in range(0, len(y), batch_size):
        probs = classifier_forward(params, nm.Tensor(x[start:start + batch_size]))
        hits += int((probs.data.argmax(axis=1) == y[start:start + batch_size]).sum())
    return hits / len(y) if len(y) else float("nan")


# ---------------------------------------------------------------------------
# combiners

def combine(scores, det_conf, combiner):
    """Map the four per-classifier scores (and detector confidence) to alpha."""
    if combiner == "const1":
        return 1.0
    if combiner.startswith("clf"):
        k = int(combiner[3:])
        return float(scores[k])
    if combiner == "avg":
        return float(np.mean(scores))
    if combiner == "max":
        return float(np.max(scores))
    if combiner == "maxdet":
        return float(max(np.max(scores), det_conf))
    raise ValueError(f"unknown combiner '{combiner}' (choose from {COMBINERS})")


def classifier_scores(ensemble, image, ann):
    """Per-member probability of the annotation's class for its crop."""
    crop = crop_resize(image, ann, ensemble.crop_size)
    return [float(classify(params, crop)[ann.class_id]) for params in ensemble.members]


def batch_classifier_scores(ensemble, crops, class_ids, batch_size=64):
    """Per-member class scores for many uint8 crops; returns [n, members]."""
    n = len(crops)
    scores = np.empty((n, len(ensemble.members)), dtype=np.float64)
    if n == 0:
        return scores
    x = np.stack([c.astype(np.float32) / 255.0 for c in crops])
    ids = np.asarray(class_ids)
    for k, params in enumerate(ensemble.members):
        for start in range(0, n, batch_size):
            probs = classifier_forward(params, nm.Tensor(x[start:start + batch_size])).data
            rows = np.arange(probs.shape[0])
            scores[start:start + batch_size, k] = probs[rows, ids[start:start + batch_size]]
    return scores


def score_annotation(ensemble, image, ann, det_conf, combiner):
    if not 0.0 <= det_conf <= 1.0:
        raise ValueError(f"detector confidence out of [0,1]: {det_conf}")
    if combiner == "const1":
        return 1.0
    return combine(classifier_scores(ensemble, image, ann), det_conf, combiner)


# ---------------------------------------------------------------------------
# checkpoint IO

def save_ensemble(ensemble, path):
    flat = {}
    for k, params in enumerate(ensemble.members):
        for name, t in params.items():
            flat[f"clf{k}.{name}"] = t
    flat["meta.crop_size"] = nm.Tensor(np.asarray([ensemble.crop_size], dtype=np.float32))
    flat["meta.num_classes"] = nm.Tensor(np.asarray([ensemble.num_classes], dtype=np.float32))
    nm.save_checkpoint(flat, path)


def load_ensemble(path):
    flat = nm.load_checkpoint(path)
    crop_size = int(flat.pop("meta.crop_size").data[0])
    num_classes = int(flat.pop("meta.num_classes").data[0])
    members = []
    for k in range(ENSEMBLE_SIZE):
        prefix = f"clf{k}."
        params = {name[len(prefix):]: t for name, t in flat.items()
                  if name.startswith(prefix)}
        if not params:
            raise ValueError(f"{path}: missing classifier {k} in ensemble checkpoint")
        members.append(params)
    return ClassifierEnsemble(members, crop_size, num_classes)
