"""Run configuration: one YAML file, every key explicit, snapshotted per run.

Precedence is command-line override > file > the defaults below. The
resolved configuration (all keys) is written next to each run's results.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .models import WrnSpec

METHODS = ("baseline", "kd", "atkd", "rlkd", "rlkd+kd", "ctkd", "ctkd_wt", "fitnet")
DATASET_KINDS = ("synthetic", "cifar10", "cifar100", "svhn")
_EXPERT_KEYS = (
    "teacher", "optimizer", "lr", "milestones", "lr_decay", "momentum", "weight_decay", "expert_epochs",
    "batch_size", "seed", "augment", "pad", "hflip_prob", "threads", "clock", "dataset",
)


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    path: str | None = None
    train_subset: int | None = None  # first-N after a seeded shuffle; None = all
    test_subset: int | None = None
    num_classes: int = 2  # synthetic only; file layouts fix their own
    train_samples: int = 256
    test_samples: int = 256
    separation: float = 3.0
    noise: float = 1.0
    data_seed: int = 0


@dataclass
class TrainConfig:
    method: str = "ctkd"
    student: str = "WRN-16-1"
    teacher: str = "WRN-40-1"
    optimizer: str = "sgd"
    lr: float = 0.1
    milestones: list[int] = field(default_factory=lambda: [60, 120, 160])
    lr_decay: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 200
    expert_epochs: int | None = None  # None = same as epochs
    batch_size: int = 128
    seed: int = 0
    l2_lambda: float = 0.5
    beta: float = 1000.0
    tau: float = 4.0
    p: float = 2.0
    kd_lambda: float = 1.0
    kd_scale_tau_sq: bool = True
    attention_form: str = "spatial_mean"  # norm | squared | spatial_mean; see README
    hint_weight: float = 0.1
    hint_tap: int = 1
    transfer_groups: int = 1
    augment: bool = True
    pad: int = 4
    hflip_prob: float = 0.5
    log_every: int = 100
    threads: int = 1
    clock: str = "wall"  # "none" writes 0.0 seconds so metrics files are byte-reproducible
    expert_checkpoint: str | None = None
    share_expert: bool = False
    output_dir: str = "runs"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    # -- derived ---------------------------------------------------------
    @property
    def num_classes(self) -> int:
        ds = self.dataset
        return {"cifar10": 10, "svhn": 10, "cifar100": 100}.get(ds.kind, ds.num_classes)

    @property
    def student_spec(self) -> WrnSpec:
        return WrnSpec.parse(self.student, self.num_classes)

    @property
    def teacher_spec(self) -> WrnSpec:
        return WrnSpec.parse(self.teacher, self.num_classes)

    @property
    def total_expert_epochs(self) -> int:
        return self.epochs if self.expert_epochs is None else self.expert_epochs

    def validate(self) -> TrainConfig:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; valid methods: {', '.join(METHODS)}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        ms = list(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m < 0 or m >= self.epochs for m in ms):
            raise ConfigError(f"milestones {ms} must be strictly increasing and below epochs={self.epochs}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not self.p > 1:
            raise ConfigError(f"p must exceed 1, got {self.p}")
        if self.clock not in ("wall", "none"):
            raise ConfigError(f"clock must be 'wall' or 'none', got {self.clock!r}")
        if self.dataset.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {self.dataset.kind!r}")
        if self.dataset.kind != "synthetic" and not self.dataset.path:
            raise ConfigError(f"dataset.path is required for {self.dataset.kind}")
        if not 0 <= self.hint_tap <= 2:
            raise ConfigError(f"hint_tap must be 0, 1 or 2, got {self.hint_tap}")
        self.student_spec, self.teacher_spec  # parse errors surface here
        return self

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> TrainConfig:
        raw = dict(raw or {})
        ds = raw.pop("dataset", {}) or {}
        _check_keys(cls, raw, "")
        _check_keys(DatasetConfig, ds, "dataset.")
        try:
            cfg = cls(**raw, dataset=DatasetConfig(**ds))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.milestones = [int(m) for m in cfg.milestones]
        return cfg

    def run_id(self) -> str:
        """Content hash of the serialized config (output_dir excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def expert_key(self) -> str:
        """Hash of exactly the fields that determine the Stage-1 expert."""
        d = self.to_dict()
        sub = {k: d[k] for k in _EXPERT_KEYS}
        sub["expert_epochs"] = self.total_expert_epochs
        if self.share_expert:
            sub["seed"] = 0
        blob = json.dumps(sub, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)


def _check_keys(cls, raw: dict, prefix: str) -> None:
    known = {f.name for f in fields(cls)} - {"dataset"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply 'key=value' (or 'dataset.key=value') strings; values parse as YAML scalars."""
    raw = json.loads(json.dumps(raw))  # deep copy
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        target = raw
        parts = key.strip().split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigError(f"override {key!r} does not address a mapping")
        target[parts[-1]] = yaml.safe_load(value)
    return raw


def load_config(path, overrides: list[str] | None = None) -> TrainConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}".replace("\n", " ")) from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return TrainConfig.from_dict(apply_overrides(raw, overrides or [])).validate()


def dump_config(cfg: TrainConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
