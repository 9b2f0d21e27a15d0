"""Versioned JSON experiment configuration with a derived seed ledger."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import nn
from .errors import ParameterError, SpecError
from .pipeline import TrainSettings

SCHEMA_VERSION = 1

DEFAULT_PAIRS = [["F", "M"], ["child", "young"], ["early_adult", "young"],
                 ["middle", "young"], ["older", "young"]]


@dataclass
class ModelSection:
    channels: list = field(default_factory=lambda: [16, 32])
    head: str = "time_gap"
    n_frames: int = 180


@dataclass
class SplitSection:
    train_frac: float = 0.7


@dataclass
class EvalSection:
    repeats: int = 50
    pairs: list = field(default_factory=lambda: [list(p) for p in DEFAULT_PAIRS])


@dataclass
class AttackSection:
    channels: int = 4
    iters: int = 100
    lr: float = 0.1
    lot_q: float = 0.0128  # sampling rate and step count used to calibrate the
    steps: int = 2000  # noise of a DP-protected leak
    clip_norm: float = 1.5


@dataclass
class ExperimentConfig:
    manifest: str
    mode: str = "non_dp"
    master_seed: int = 0
    schema_version: int = SCHEMA_VERSION
    model: ModelSection = field(default_factory=ModelSection)
    training: dict = field(default_factory=dict)
    split: SplitSection = field(default_factory=SplitSection)
    evaluation: EvalSection = field(default_factory=EvalSection)
    attack: AttackSection = field(default_factory=AttackSection)
    base_dir: str = "."

    def settings(self) -> TrainSettings:
        try:
            return TrainSettings(mode=self.mode, **self.training)
        except ParameterError as exc:
            raise SpecError(f"training: {exc}") from exc

    def manifest_path(self):
        p = Path(self.manifest)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def seeds(self):
        """Seed ledger derived from the master seed.

        Split and crop seeds depend only on the master seed so that DP and
        non-DP runs of one experiment share the test split and test crops.
        """
        m = int(self.master_seed)
        return {"master": m, "split": m, "init": m + 1, "train": m + 2, "noise": m + 3, "crop": m + 4}

    def model_config(self, n_classes):
        return nn.desk_config(n_classes, seed=self.seeds()["init"],
                              input_shape=(1, 80, self.model.n_frames),
                              channels=tuple(self.model.channels), head=self.model.head)

    def to_dict(self):
        d = asdict(self)
        d.pop("base_dir")
        return d

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _section(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise SpecError(f"{name}: must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise SpecError(f"{name}.{unknown[0]}: unknown key")
    return cls(**data)


TRAINING_KEYS = {f.name for f in fields(TrainSettings)} - {"mode"}


def parse_config(data, base_dir="."):
    if not isinstance(data, dict):
        raise SpecError("config must be a JSON object")
    top = {f.name for f in fields(ExperimentConfig)} - {"base_dir"}
    unknown = sorted(set(data) - top)
    if unknown:
        raise SpecError(f"{unknown[0]}: unknown key")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise SpecError(f"schema_version: unsupported version {version!r}")
    if "manifest" not in data:
        raise SpecError("manifest: required key missing")
    training = data.get("training", {})
    if not isinstance(training, dict):
        raise SpecError("training: must be an object")
    bad = sorted(set(training) - TRAINING_KEYS)
    if bad:
        raise SpecError(f"training.{bad[0]}: unknown key")
    cfg = ExperimentConfig(
        manifest=str(data["manifest"]),
        mode=data.get("mode", "non_dp"),
        master_seed=data.get("master_seed", 0),
        model=_section(ModelSection, data.get("model"), "model"),
        training=dict(training),
        split=_section(SplitSection, data.get("split"), "split"),
        evaluation=_section(EvalSection, data.get("evaluation"), "evaluation"),
        attack=_section(AttackSection, data.get("attack"), "attack"),
        base_dir=str(base_dir),
    )
    if cfg.mode not in ("non_dp", "dp"):
        raise SpecError("mode: must be 'non_dp' or 'dp'")
    if not isinstance(cfg.master_seed, int):
        raise SpecError("master_seed: must be an integer")
    if not 0 < cfg.split.train_frac < 1:
        raise SpecError("split.train_frac: must lie in (0, 1)")
    if cfg.evaluation.repeats < 1:
        raise SpecError("evaluation.repeats: must be >= 1")
    for p in cfg.evaluation.pairs:
        if not (isinstance(p, list) and len(p) == 2):
            raise SpecError("evaluation.pairs: each pair is [minority, majority]")
    try:
        nn.desk_config(2, channels=tuple(cfg.model.channels), head=cfg.model.head,
                       input_shape=(1, 80, cfg.model.n_frames)).feature_shape()
    except (ParameterError, TypeError) as exc:
        raise SpecError(f"model: {exc}") from exc
    cfg.settings()
    return cfg


def load_config(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise SpecError(f"{path}: config file not found") from exc
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(data, base_dir=path.parent)
