"""Line-oriented run configuration: `section.key = value` per line.

Every key has a documented default; unknown keys are errors; numeric
ranges are validated at load. Parsing a serialized config reproduces it
exactly (parse -> serialize -> parse is a fixed point).
"""

from .detector import DetectorConfig, TrainConfig
from .scoring import ClassifierTrainConfig
from .synthdata import SceneSpec

# key -> default; the default's type decides how values parse
DEFAULTS = {
    "data.image_size": 64,
    "data.classes": "disk,square,triangle,ring,cross",
    "data.min_objects": 1,
    "data.max_objects": 3,
    "data.min_size": 0.25,
    "data.max_size": 0.5,
    "data.color_jitter": 0.25,
    "data.noise_level": 0.02,
    "data.gold_size": 64,          # gold images per class
    "data.unlabeled_factor": 8.0,  # unlabeled pool size as multiple of gold
    "data.test_size": 128,
    "detector.s": 4,
    "detector.b": 2,
    "detector.lambda_coord": 5.0,
    "detector.lambda_noobj": 0.5,
    "detector.conf_threshold": 0.25,
    "detector.nms_iou_threshold": 0.45,
    "detector.conf_target": "one",
    "teacher.lr": 0.02,
    "teacher.momentum": 0.9,
    "teacher.epochs": 30,
    "teacher.batch_size": 16,
    "student.lr": 0.02,
    "student.momentum": 0.9,
    "student.epochs": 12,
    "student.batch_size": 16,
    "student.noobj_alpha": "mean",
    "classifier.crop_size": 32,
    "classifier.lr": 0.02,
    "classifier.momentum": 0.9,
    "classifier.epochs": 20,
    "classifier.batch_size": 32,
    "classifier.holdout_fraction": 0.2,
}

_UNIT_OPEN = ("detector.conf_threshold", "detector.nms_iou_threshold")
_POSITIVE = ("data.image_size", "data.gold_size", "data.test_size",
             "teacher.epochs", "teacher.batch_size", "student.epochs",
             "student.batch_size", "classifier.epochs", "classifier.batch_size",
             "detector.s", "detector.b", "classifier.crop_size")


class ConfigError(ValueError):
    pass


class RunConfig:
    def __init__(self, values=None):
        self.values = dict(DEFAULTS)
        if values:
            for k, v in values.items():
                self.set(k, v)

    def set(self, key, raw):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key '{key}'")
        default = DEFAULTS[key]
        try:
            if isinstance(default, bool):
                value = str(raw).lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                value = int(raw)
            elif isinstance(default, float):
                value = float(raw)
            else:
                value = str(raw)
        except ValueError:
            raise ConfigError(f"bad value for '{key}': {raw!r}") from None
        self.values[key] = value
        self._validate(key)

    def _validate(self, key):
        v = self.values[key]
        if key in _UNIT_OPEN and not 0.0 < v < 1.0:
            raise ConfigError(f"'{key}' must be in (0,1), got {v}")
        if key in _POSITIVE and v < 1:
            raise ConfigError(f"'{key}' must be >= 1, got {v}")
        if key.endswith(".lr") and v <= 0:
            raise ConfigError(f"'{key}' must be > 0, got {v}")
        if key.endswith(".momentum") and not 0.0 <= v < 1.0:
            raise ConfigError(f"'{key}' must be in [0,1), got {v}")

    def get(self, key):
        return self.values[key]

    @classmethod
    def load(cls, path):
        cfg = cls()
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'section.key = value'")
                key, _, raw = line.partition("=")
                try:
                    cfg.set(key.strip(), raw.strip())
                except ConfigError as exc:
                    raise ConfigError(f"{path}:{lineno}: {exc}") from None
        return cfg

    def serialize(self):
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, float):
                lines.append(f"{key} = {v!r}")
            else:
                lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.serialize())

    # typed views -----------------------------------------------------------

    def scene_spec(self):
        classes = tuple(self.values["data.classes"].split(","))
        return SceneSpec(
            image_size=self.values["data.image_size"],
            class_names=classes,
            min_objects=self.values["data.min_objects"],
            max_objects=self.values["data.max_objects"],
            min_size=self.values["data.min_size"],
            max_size=self.values["data.max_size"],
            color_jitter=self.values["data.color_jitter"],
            noise_level=self.values["data.noise_level"],
        )

    def detector_config(self):
        return DetectorConfig(
            s=self.values["detector.s"],
            b=self.values["detector.b"],
            c=len(self.values["data.classes"].split(",")),
            lambda_coord=self.values["detector.lambda_coord"],
            lambda_noobj=self.values["detector.lambda_noobj"],
            input_size=self.values["data.image_size"],
            conf_threshold=self.values["detector.conf_threshold"],
            nms_iou_threshold=self.values["detector.nms_iou_threshold"],
            conf_target=self.values["detector.conf_target"],
        )

    def train_config(self, stage, seed=0, alpha_weighting="off"):
        return TrainConfig(
            lr=self.values[f"{stage}.lr"],
            momentum=self.values[f"{stage}.momentum"],
            epochs=self.values[f"{stage}.epochs"],
            batch_size=self.values[f"{stage}.batch_size"],
            seed=seed,
            alpha_weighting=alpha_weighting,
            noobj_alpha=self.values.get("student.noobj_alpha", "one")
            if stage == "student" else "one",
        )

    def classifier_config(self, seed=0):
        return ClassifierTrainConfig(
            crop_size=self.values["classifier.crop_size"],
            lr=self.values["classifier.lr"],
            momentum=self.values["classifier.momentum"],
            epochs=self.values["classifier.epochs"],
            batch_size=self.values["classifier.batch_size"],
            holdout_fraction=self.values["classifier.holdout_fraction"],
            seed=seed,
        )


GRID_DEFAULTS = {
    "grid.gold_sizes": "16,32,48,64",
    "grid.combiners": "const1,max",
    "grid.inits": "bootstrap",
    "grid.seeds": "0,1,2,3,4",
    "grid.gold_fractions": "1.0",
    "grid.unlabeled_factor": 8.0,
    "grid.test_size": 128,
}


def load_grid(path):
    """Parse a sweep grid file into an ExperimentGrid."""
    from .pipeline import ExperimentGrid

    values = dict(GRID_DEFAULTS)
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'grid.key = value'")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in GRID_DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown grid key '{key}'")
            values[key] = raw.strip()
    return ExperimentGrid(
        gold_sizes=[int(x) for x in str(values["grid.gold_sizes"]).split(",")],
        combiners=str(values["grid.combiners"]).split(","),
        inits=str(values["grid.inits"]).split(","),
        seeds=[int(x) for x in str(values["grid.seeds"]).split(",")],
        gold_fractions=[float(x) for x in str(values["grid.gold_fractions"]).split(",")],
        unlabeled_factor=float(values["grid.unlabeled_factor"]),
        test_size=int(values["grid.test_size"]),
    )
