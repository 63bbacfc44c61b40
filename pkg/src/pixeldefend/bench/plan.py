"""Experiment plan: a JSON document describing one full desk-scale run."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

from ..attacks import METHODS
from ..classifier import DEFENSES as NETWORKS
from ..classifier import ClassifierConfig
from ..density import DensityConfig
from ..errors import ConfigurationError

PREPROCESSORS = ("none", "feature_squeeze", "pixeldefend", "pixeldefend_adaptive")

DEFAULT_ROWS = (
    ("normal", "none"),
    ("adv_fgsm", "none"),
    ("adv_bim", "none"),
    ("label_smoothing", "none"),
    ("normal", "feature_squeeze"),
    ("adv_fgsm", "feature_squeeze"),
    ("normal", "pixeldefend"),
    ("normal", "pixeldefend_adaptive"),
    ("adv_fgsm", "pixeldefend"),
    ("adv_fgsm", "pixeldefend_adaptive"),
)


@dataclass(frozen=True)
class DatasetSpec:
    side: int = 16
    n_classes: int = 4
    train: int = 4000
    validation: int = 500
    test: int = 1000


@dataclass(frozen=True)
class AttackGrid:
    methods: tuple = METHODS
    eps: tuple = (3, 13, 26)
    deepfool_max_iter: int = 50
    deepfool_overshoot: float = 0.02
    cw_kappa: float = 0.0
    cw_steps: int = 40
    cw_step_size: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "eps", tuple(int(e) for e in self.eps))
        for m in self.methods:
            if m not in METHODS:
                raise ConfigurationError(f"unknown attack {m!r}")
        if any(e < 0 for e in self.eps):
            raise ConfigurationError("attack eps must be non-negative")


@dataclass(frozen=True)
class ExperimentPlan:
    """Every knob of a run; the report is a pure function of this document."""

    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    density: DensityConfig = field(default_factory=DensityConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    label_smoothing: float = 0.1
    adversarial_delta: float = 8.0
    attacks: AttackGrid = field(default_factory=AttackGrid)
    rows: tuple = DEFAULT_ROWS
    eps_defend: int = 26
    adaptive_skip: str = "low_bpd"
    calibration_size: int = 200
    eval_size: int = 200
    detection_size: int = 500
    fig5_size: int = 50
    fig5_eps: int = 13
    baseline_steps: int = 100
    baseline_step_size: float = 0.5
    fragile_rand_eps: int = 8
    output: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple((str(n), str(d)) for n, d in self.rows))
        for network, defense in self.rows:
            if network not in NETWORKS:
                raise ConfigurationError(f"unknown network {network!r}; expected one of {NETWORKS}")
            if defense not in PREPROCESSORS:
                raise ConfigurationError(f"unknown defense {defense!r}; expected one of {PREPROCESSORS}")
        if self.eval_size > self.dataset.test or self.detection_size > self.dataset.test:
            raise ConfigurationError("evaluation subsets cannot exceed the test split")
        if self.calibration_size > self.dataset.validation:
            raise ConfigurationError("calibration subset cannot exceed the validation split")
        if self.eps_defend < 0:
            raise ConfigurationError("eps_defend must be >= 0")
        if self.adaptive_skip not in ("low_bpd", "high_bpd"):
            raise ConfigurationError(f"adaptive_skip must be 'low_bpd' or 'high_bpd', got {self.adaptive_skip!r}")

    # -- serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rows"] = [list(r) for r in self.rows]
        d["attacks"]["methods"] = list(self.attacks.methods)
        d["attacks"]["eps"] = list(self.attacks.eps)
        d["classifier"]["widths"] = list(self.classifier.widths)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentPlan":
        if not isinstance(raw, dict):
            raise ConfigurationError("plan must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown plan keys: {sorted(unknown)}")
        nested = {"dataset": DatasetSpec, "density": DensityConfig,
                  "classifier": ClassifierConfig, "attacks": AttackGrid}
        kwargs = {}
        for key, value in raw.items():
            if key in nested:
                kwargs[key] = _build(nested[key], value, key)
            else:
                kwargs[key] = value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        """Hash of everything except the output location."""
        d = self.to_dict()
        d.pop("output", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _build(kind, value, key):
    if not isinstance(value, dict):
        raise ConfigurationError(f"plan key {key!r} must be an object")
    allowed = {f.name for f in fields(kind)}
    unknown = set(value) - allowed
    if unknown:
        raise ConfigurationError(f"unknown keys in {key!r}: {sorted(unknown)}")
    try:
        return kind(**value)
    except TypeError as exc:
        raise ConfigurationError(f"{key}: {exc}") from None


def load_plan(path) -> ExperimentPlan:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    return ExperimentPlan.from_dict(raw)


def small_plan(seed: int = 0, **overrides) -> ExperimentPlan:
    """A plan on 8x8 images that runs in seconds, for smoke tests and examples."""
    base = dict(
        seed=seed,
        dataset=DatasetSpec(side=8, n_classes=2, train=256, validation=40, test=80),
        density=DensityConfig(depth=2, width=8, epochs=2, learning_rate=1e-2, seed=seed, first_kernel=3),
        classifier=ClassifierConfig(epochs=6, learning_rate=5e-3, seed=seed, widths=(8, 8, 8)),
        attacks=AttackGrid(eps=(4,), deepfool_max_iter=5, cw_steps=5),
        eps_defend=8, calibration_size=20, eval_size=40, detection_size=40,
        fig5_size=6, fig5_eps=4, baseline_steps=5, fragile_rand_eps=8,
    )
    base.update(overrides)
    return ExperimentPlan(**base)


def attack_columns(methods: Sequence[str]) -> list:
    return ["CLEAN"] + [m.upper() for m in METHODS if m in methods] + (["STRONGEST"] if methods else [])
