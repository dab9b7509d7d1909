"""Deterministic synthetic scene generator and dataset IO.

Renders small RGB images containing geometric shapes (disk, square,
triangle, ring, cross) with exact tight bounding boxes, and materializes
the four dataset roles: gold, unlabeled, silver, test. Every image is a
pure function of (scene spec, per-image seed).
"""

import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

ROLE_GOLD = "gold"
ROLE_UNLABELED = "unlabeled"
ROLE_SILVER = "silver"
ROLE_TEST = "test"
ROLES = (ROLE_GOLD, ROLE_UNLABELED, ROLE_SILVER, ROLE_TEST)

SHAPE_KINDS = ("disk", "square", "triangle", "ring", "cross")

MANIFEST_NAME = "manifest.txt"
SIDECAR_EXT = ".gt"  # hidden ground truth for the unlabeled pool; never trained on

_PLACEMENT_ATTEMPTS = 100


@dataclass
class Annotation:
    """A class-labeled box, center/size normalized by image size."""
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def validate(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"annotation center out of range: ({self.cx}, {self.cy})")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"annotation size out of range: ({self.w}, {self.h})")
        if min(self.cx + self.w / 2, 1.0) <= max(self.cx - self.w / 2, 0.0):
            raise ValueError("annotation box degenerate inside the image")
        if min(self.cy + self.h / 2, 1.0) <= max(self.cy - self.h / 2, 0.0):
            raise ValueError("annotation box degenerate inside the image")
        return self


@dataclass
class ScoredAnnotation:
    """Silver annotation: a box plus its confidence metric and detector score."""
    annotation: Annotation
    alpha: float
    detector_confidence: float

    def validate(self):
        self.annotation.validate()
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha out of [0,1]: {self.alpha}")
        if not 0.0 <= self.detector_confidence <= 1.0:
            raise ValueError(f"detector confidence out of [0,1]: {self.detector_confidence}")
        return self


@dataclass
class SceneSpec:
    image_size: int = 64
    class_names: tuple = SHAPE_KINDS
    min_objects: int = 1
    max_objects: int = 3
    min_size: float = 0.25
    max_size: float = 0.5
    color_jitter: float = 0.25
    noise_level: float = 0.02
    max_overlap_iou: float = 0.1

    @property
    def num_classes(self):
        return len(self.class_names)


@dataclass
class DatasetItem:
    stem: str
    image: np.ndarray            # uint8 [3, H, W]
    annotations: list


@dataclass
class Dataset:
    role: str
    items: list = field(default_factory=list)
    class_names: tuple = SHAPE_KINDS
    seed: int = 0
    # per-stem true annotations for the unlabeled pool; analysis only
    hidden_truth: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.items)


class PlacementError(RuntimeError):
    pass


def _box_iou(a, b):
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by0, by1 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def shape_mask(kind, cx, cy, size, image_size):
    """Boolean pixel mask of one shape; center and size are fractions."""
    n = image_size
    yy, xx = np.mgrid[0:n, 0:n]
    # pixel centers
    px = (xx + 0.5) / n
    py = (yy + 0.5) / n
    half = size / 2.0
    if kind == "disk":
        return (px - cx) ** 2 + (py - cy) ** 2 <= half ** 2
    if kind == "square":
        return (np.abs(px - cx) <= half) & (np.abs(py - cy) <= half)
    if kind == "triangle":
        # upward triangle: apex at the top, base at the bottom
        t = (py - (cy - half)) / size
        return (t >= 0) & (t <= 1) & (np.abs(px - cx) <= t * half)
    if kind == "ring":
        d2 = (px - cx) ** 2 + (py - cy) ** 2
        return (d2 <= half ** 2) & (d2 >= (0.55 * half) ** 2)
    if kind == "cross":
        t = 0.3 * half
        horiz = (np.abs(py - cy) <= t) & (np.abs(px - cx) <= half)
        vert = (np.abs(px - cx) <= t) & (np.abs(py - cy) <= half)
        return horiz | vert
    raise ValueError(f"unknown shape kind: {kind}")


def _mask_bbox(mask, image_size):
    ys, xs = np.nonzero(mask)
    x0, x1 = xs.min(), xs.max()
    y0, y1 = ys.min(), ys.max()
    w = (x1 - x0 + 1) / image_size
    h = (y1 - y0 + 1) / image_size
    cx = (x0 + (x1 - x0 + 1) / 2.0) / image_size
    cy = (y0 + (y1 - y0 + 1) / 2.0) / image_size
    return cx, cy, w, h


def render_scene(spec, rng_seed, force_class=None):
    """Render one scene; returns (uint8 image [3,H,W], list of Annotation)."""
    rng = np.random.default_rng(rng_seed)
    n = spec.image_size
    base = rng.uniform(15, 55, size=3)
    img = np.ones((3, n, n), dtype=np.float64) * base[:, None, None]

    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    annotations = []
    placed = []
    for obj_idx in range(n_objects):
        if obj_idx == 0 and force_class is not None:
            class_id = int(force_class)
        else:
            class_id = int(rng.integers(spec.num_classes))
        for attempt in range(_PLACEMENT_ATTEMPTS):
            size = float(rng.uniform(spec.min_size, spec.max_size))
            cx = float(rng.uniform(size / 2, 1 - size / 2))
            cy = float(rng.uniform(size / 2, 1 - size / 2))
            cand = (cx, cy, size, size)
            if all(_box_iou(cand, p) <= spec.max_overlap_iou for p in placed):
                break
        else:
            raise PlacementError(
                f"could not place object {obj_idx} after {_PLACEMENT_ATTEMPTS} attempts")
        placed.append(cand)

        mask = shape_mask(spec.class_names[class_id], cx, cy, size, n)
        color = rng.uniform(110, 245, size=3)
        color *= 1.0 + spec.color_jitter * rng.uniform(-1, 1, size=3)
        img[:, mask] = np.clip(color, 90, 255)[:, None]

        bcx, bcy, bw, bh = _mask_bbox(mask, n)
        annotations.append(Annotation(class_id, bcx, bcy, bw, bh).validate())

    if spec.noise_level > 0:
        img += rng.standard_normal(img.shape) * spec.noise_level * 255.0
    return np.clip(img, 0, 255).astype(np.uint8), annotations


def derive_seed(master, *names):
    """Stable named substream derivation from one master seed."""
    import hashlib
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest(), "little")


def _generate_role(spec, role, count, seed):
    items = []
    truth = {}
    for i in range(count):
        img_seed = derive_seed(seed, role, i)
        force_class = i % spec.num_classes  # keep classes balanced
        image, anns = render_scene(spec, img_seed, force_class=force_class)
        stem = f"{role}_{i:06d}"
        if role == ROLE_UNLABELED:
            truth[stem] = anns
            anns = []
        items.append(DatasetItem(stem, image, anns))
    ds = Dataset(role=role, items=items, class_names=tuple(spec.class_names), seed=seed)
    ds.hidden_truth = truth
    return ds


def generate_splits(spec, sizes, seed):
    """Materialize gold / unlabeled / test datasets from disjoint seed streams."""
    for key in ("gold", "unlabeled", "test"):
        if sizes[key] < 1:
            raise ValueError(f"split size for '{key}' must be >= 1, got {sizes[key]}")
    gold = _generate_role(spec, ROLE_GOLD, sizes["gold"], seed)
    unlabeled = _generate_role(spec, ROLE_UNLABELED, sizes["unlabeled"], seed)
    test = _generate_role(spec, ROLE_TEST, sizes["test"], seed)
    return gold, unlabeled, test


def crop_resize(image, annotation, out_size):
    """Crop an annotation's box (clamped to bounds) and resize bilinearly."""
    _, h, w = image.shape
    x0 = max(0, int(np.floor((annotation.cx - annotation.w / 2) * w)))
    x1 = min(w, int(np.ceil((annotation.cx + annotation.w / 2) * w)))
    y0 = max(0, int(np.floor((annotation.cy - annotation.h / 2) * h)))
    y1 = min(h, int(np.ceil((annotation.cy + annotation.h / 2) * h)))
    if x1 <= x0 or y1 <= y0:
        raise ValueError(
            f"zero-area crop after clamping: x [{x0},{x1}) y [{y0},{y1})")
    crop = image[:, y0:y1, x0:x1]
    if crop.shape[1] == out_size and crop.shape[2] == out_size:
        return crop.copy()
    pil = Image.fromarray(np.transpose(crop, (1, 2, 0)))
    pil = pil.resize((out_size, out_size), Image.BILINEAR)
    return np.transpose(np.asarray(pil, dtype=np.uint8), (2, 0, 1))


# ---------------------------------------------------------------------------
# dataset files

def _format_annotation(ann):
    if isinstance(ann, ScoredAnnotation):
        a = ann.annotation
        return (f"{a.class_id} {a.cx:.6f} {a.cy:.6f} {a.w:.6f} {a.h:.6f} "
                f"{ann.alpha:.6f} {ann.detector_confidence:.6f}")
    return f"{ann.class_id} {ann.cx:.6f} {ann.cy:.6f} {ann.w:.6f} {ann.h:.6f}"


def _parse_annotation(line, where):
    parts = line.split()
    if len(parts) not in (5, 7):
        raise ValueError(f"{where}: expected 5 or 7 fields, got {len(parts)}")
    try:
        class_id = int(parts[0])
        vals = [float(p) for p in parts[1:]]
    except ValueError as exc:
        raise ValueError(f"{where}: malformed number ({exc})") from None
    ann = Annotation(class_id, *vals[:4]).validate()
    if len(parts) == 7:
        return ScoredAnnotation(ann, vals[4], vals[5]).validate()
    return ann


def write_dataset(dataset, path):
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, MANIFEST_NAME), "w") as f:
        f.write(f"role {dataset.role}\n")
        f.write("classes " + " ".join(dataset.class_names) + "\n")
        f.write(f"seed {dataset.seed}\n")
        for item in dataset.items:
            f.write(f"image {item.stem}\n")
    for item in dataset.items:
        arr = np.transpose(item.image, (1, 2, 0))
        Image.fromarray(arr).save(os.path.join(path, item.stem + ".png"))
        with open(os.path.join(path, item.stem + ".txt"), "w") as f:
            for ann in item.annotations:
                f.write(_format_annotation(ann) + "\n")
        truth = dataset.hidden_truth.get(item.stem)
        if truth is not None:
            with open(os.path.join(path, item.stem + SIDECAR_EXT), "w") as f:
                for ann in truth:
                    f.write(_format_annotation(ann) + "\n")


def read_dataset(path, load_hidden_truth=False):
    manifest = os.path.join(path, MANIFEST_NAME)
    role = None
    class_names = None
    seed = 0
    stems = []
    with open(manifest) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            key, _, rest = line.partition(" ")
            if key == "role":
                role = rest
            elif key == "classes":
                class_names = tuple(rest.split())
            elif key == "seed":
                seed = int(rest)
            elif key == "image":
                stems.append(rest)
            else:
                raise ValueError(f"{manifest}:{lineno}: unknown manifest key '{key}'")
    if role not in ROLES:
        raise ValueError(f"{manifest}: missing or invalid role '{role}'")

    ds = Dataset(role=role, class_names=class_names, seed=seed)
    for stem in stems:
        img = np.transpose(
            np.asarray(Image.open(os.path.join(path, stem + ".png")), dtype=np.uint8),
            (2, 0, 1))
        ann_path = os.path.join(path, stem + ".txt")
        anns = []
        with open(ann_path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if line:
                    anns.append(_parse_annotation(line, f"{ann_path}:{lineno}"))
        ds.items.append(DatasetItem(stem, img, anns))
        if load_hidden_truth:
            side = os.path.join(path, stem + SIDECAR_EXT)
            if os.path.exists(side):
                truth = []
                with open(side) as f:
                    for lineno, line in enumerate(f, 1):
                        line = line.strip()
                        if line:
                            truth.append(_parse_annotation(line, f"{side}:{lineno}"))
                ds.hidden_truth[stem] = truth
    return ds
