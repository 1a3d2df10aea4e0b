"""Experiment configuration: validated JSON documents, presets and dotted overrides."""
from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import classifier, diffusion
from .attacks import METHODS, AttackConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticSection(_Strict):
    n_train: int = Field(4000, ge=2)
    n_test: int = Field(1000, ge=2)
    n_features: int = Field(20, ge=4)
    coarse_features: int = 4
    coarse_gap: float = 0.3
    coarse_spread: float = 0.2
    fine_gap: float = 0.05
    latent_dim: int = 2
    spread: float = 0.08
    noise: float = 0.003
    geometry_seed: int = 99


class DatasetSection(_Strict):
    kind: Literal["synthetic", "nslkdd", "unswnb15"] = "synthetic"
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    schema_path: Optional[str] = None
    subsample_n: Optional[int] = Field(None, ge=2)
    test_subsample_n: Optional[int] = Field(None, ge=2)
    test_fraction: float = Field(0.2, gt=0, lt=1)  # used when test_path is absent
    seed: int = 0
    synthetic: SyntheticSection = SyntheticSection()

    @model_validator(mode="after")
    def _paths(self):
        if self.kind != "synthetic" and not self.train_path:
            raise ValueError(f"dataset.train_path is required for kind={self.kind}")
        for name in ("train_path", "test_path", "schema_path"):
            value = getattr(self, name)
            if value and not Path(value).exists():
                raise ValueError(f"dataset.{name} does not exist: {value}")
        return self


class ClassifierSection(_Strict):
    architecture: Literal["desk", "paper"] = "desk"
    hidden: Optional[list[int]] = None
    epochs: int = Field(100, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    batch_size: Optional[int] = Field(256, ge=1)
    log_interval: int = Field(10, ge=1)
    seed: int = 0

    def train_config(self) -> classifier.ClassifierTrainConfig:
        hidden = self.hidden or (classifier.PAPER_HIDDEN if self.architecture == "paper"
                                 else classifier.DESK_HIDDEN)
        return classifier.ClassifierTrainConfig(self.epochs, self.learning_rate, self.batch_size,
                                                self.seed, tuple(hidden), self.log_interval)


class ScheduleSection(_Strict):
    T: int = Field(1000, ge=1)
    beta1: float = Field(1e-4, gt=0, lt=1)
    betaT: float = Field(0.02, gt=0, lt=1)

    @model_validator(mode="after")
    def _order(self):
        if self.beta1 > self.betaT:
            raise ValueError("schedule.beta1 must not exceed schedule.betaT")
        return self


class DiffusionSection(_Strict):
    architecture: Literal["desk", "paper"] = "desk"
    hidden: Optional[list[int]] = None
    epochs: int = Field(500, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    batch_size: Optional[int] = Field(256, ge=1)
    log_interval: int = Field(50, ge=1)
    seed: int = 0
    posterior: Literal["beta_tilde", "beta"] = "beta_tilde"
    schedule: ScheduleSection = ScheduleSection()
    # extra step counts trained with the same beta endpoints, for sigma^2 alignment
    alignment_T: list[int] = []

    @field_validator("alignment_T")
    @classmethod
    def _positive(cls, v):
        if any(t < 1 for t in v):
            raise ValueError("alignment_T entries must be >= 1")
        return v

    def all_T(self) -> list[int]:
        return [self.schedule.T] + [t for t in self.alignment_T if t != self.schedule.T]

    def make_schedule(self, T: int) -> diffusion.VarianceSchedule:
        return diffusion.linear_schedule(T, self.schedule.beta1, self.schedule.betaT)

    def train_config(self) -> diffusion.DiffusionTrainConfig:
        hidden = self.hidden or (diffusion.PAPER_HIDDEN if self.architecture == "paper"
                                 else diffusion.DESK_HIDDEN)
        return diffusion.DiffusionTrainConfig(self.epochs, self.learning_rate, self.weight_decay,
                                              self.batch_size, self.seed, tuple(hidden), self.log_interval)


class AttackSection(_Strict):
    method: str
    name: Optional[str] = None  # output directory name; defaults to the method
    epsilon: float = Field(0.03, ge=0)
    iterations: Optional[int] = None
    step_size: Optional[float] = None
    overshoot: float = 0.02
    theta: float = 0.1
    max_feature_fraction: float = 0.3
    confidence: float = 0.0
    initial_const: float = 1.0
    binary_search_steps: int = 5
    cw_learning_rate: float = 0.01
    abort_early: bool = True
    targeted: bool = True
    target_label: Optional[int] = None
    feature_mask: Optional[list[int]] = None
    seed: int = 0

    def to_attack_config(self) -> AttackConfig:
        return AttackConfig(**self.model_dump(exclude={"name"}))

    @property
    def label(self) -> str:
        return self.name or self.to_attack_config().method

    @model_validator(mode="after")
    def _method(self):
        self.to_attack_config()
        return self


class SweepSection(_Strict):
    t_grid: Union[Literal["default"], list[int]] = "default"
    seeds: list[int] = [0]
    eps_grid: list[float] = [0.01, 0.03, 0.05]
    train_rows: Optional[int] = Field(1000, ge=1)  # rows of the training split purified per step
    # attack labels swept with the extra alignment_T models; None sweeps all of them
    alignment_attacks: Optional[list[str]] = None
    workers: int = Field(1, ge=1)
    format: Literal["csv", "json"] = "csv"

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v:
            raise ValueError("sweep.seeds must be nonempty")
        return v

    def grid(self, T: int) -> list[int]:
        if self.t_grid == "default":
            return diffusion_default_grid(T)
        return sorted({t for t in self.t_grid if 0 <= t <= T})


def diffusion_default_grid(T: int) -> list[int]:
    from .harness import default_t_grid
    return default_t_grid(T)


def _default_attacks() -> list[AttackSection]:
    return [AttackSection(method=m) for m in METHODS]


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = 1
    preset: Optional[str] = None
    run_name: Optional[str] = None
    output_dir: str = "runs"
    dataset: DatasetSection = DatasetSection()
    classifier: ClassifierSection = ClassifierSection()
    diffusion: DiffusionSection = DiffusionSection()
    attacks: list[AttackSection] = Field(default_factory=_default_attacks)
    sweep: SweepSection = SweepSection()

    @model_validator(mode="after")
    def _unique_attacks(self):
        labels = [a.label for a in self.attacks]
        if len(set(labels)) != len(labels):
            raise ValueError(f"attack names must be unique, got {labels}; set attacks[i].name")
        wanted = self.sweep.alignment_attacks or []
        known = set(labels) | {f"eps-{e:g}" for e in self.sweep.eps_grid}
        unknown = [w for w in wanted if w not in known]
        if unknown:
            raise ValueError(f"sweep.alignment_attacks names unknown attacks {unknown}")
        return self


# steps swept at desk scale: fine near the optimum, sparse in the tail
DESK_T_GRID = list(range(0, 61, 2)) + [70, 80, 90, 100, 120, 150, 200, 300, 600]

PRESETS: dict[str, dict] = {
    "desk": {
        "diffusion": {"alignment_T": [100]},
        "sweep": {"t_grid": DESK_T_GRID, "alignment_attacks": ["FGSM"]},
    },
    "paper-standard": {
        "dataset": {"kind": "unswnb15"},
        "classifier": {"architecture": "paper", "epochs": 10000, "learning_rate": 1e-5, "batch_size": None},
        "diffusion": {"architecture": "paper", "epochs": 200000, "learning_rate": 1e-4, "batch_size": None,
                      "schedule": {"T": 1000, "beta1": 1e-4, "betaT": 0.02}, "alignment_T": [100]},
    },
    "paper-constant": {
        "dataset": {"kind": "unswnb15"},
        "classifier": {"architecture": "paper", "epochs": 10000, "learning_rate": 1e-5, "batch_size": None},
        "diffusion": {"architecture": "paper", "epochs": 200000, "learning_rate": 1e-4, "batch_size": None,
                      "schedule": {"T": 1000, "beta1": 1e-4, "betaT": 1e-4}},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(item: str) -> tuple[list[str], object]:
    """``a.b.c=value``; the value is parsed as JSON when possible, else kept as a string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key.path=value")
    key, raw = item.split("=", 1)
    path = key.strip().split(".")
    if not all(path):
        raise ConfigError(f"bad override key {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    doc = copy.deepcopy(doc)
    for item in overrides:
        path, value = parse_override(item)
        node = doc
        for i, part in enumerate(path[:-1]):
            if isinstance(node, list):
                try:
                    node = node[int(part)]
                except (ValueError, IndexError):
                    raise ConfigError(f"override {item!r}: no list element {part!r}") from None
                continue
            node = node.setdefault(part, {})
            if not isinstance(node, (dict, list)):
                raise ConfigError(f"override {item!r}: {'.'.join(path[:i + 1])} is not a section")
        last = path[-1]
        if isinstance(node, list):
            try:
                node[int(last)] = value
            except (ValueError, IndexError):
                raise ConfigError(f"override {item!r}: no list element {last!r}") from None
        else:
            node[last] = value
    return doc


def build_config(doc: Optional[dict] = None, overrides: Optional[list[str]] = None) -> ExperimentConfig:
    """Validate a raw document after expanding its preset and applying overrides."""
    doc = dict(doc or {})
    preset = doc.get("preset")
    overrides = list(overrides or [])
    for item in overrides:
        path, value = parse_override(item)
        if path == ["preset"]:
            preset = value
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        doc = _merge(PRESETS[preset], doc)
    # overrides may reach into defaulted sections and lists, so start from the full defaults
    doc = apply_overrides(_merge(ExperimentConfig().model_dump(mode="json"), doc), overrides)
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides: Optional[list[str]] = None) -> ExperimentConfig:
    doc = {}
    if path is not None:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        if "schema_version" not in doc:
            raise ConfigError(f"{path}: missing schema_version")
    return build_config(doc, overrides)
