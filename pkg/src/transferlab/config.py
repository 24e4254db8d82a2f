"""Experiment configuration: one YAML file describes a full run.

The schema is validated up front and every violation is reported at once.
A normalized config has a stable content digest used for run directories,
checkpoint caching, and record provenance, so semantically identical
configs (whatever the key order in the file) share cached work.

Schema (defaults in parentheses; the train/attack defaults are the standard
recipe: 30 epochs, lr 0.01, momentum 0.9, weight decay 1e-4, epsilon 0.1):

    data:
      root: path              # or env TRANSFERLAB_DATA_ROOT
      subsample_fraction: 1.0 # stratified train-split fraction
      seed: 0
      synthetic: {train_size: N, test_size: M, seed: 0}   # optional
    models:                   # list; id must be unique
      - {id: str, kind: multitrack, depth: 3, width: 4, stem_channels: 64, seed: 0}
      - {id: str, kind: resnet18|googlenet_small|mobilenet_small, seed: 0}
    train: {epochs: 30, learning_rate: 0.01, momentum: 0.9,
            weight_decay: 0.0001, batch_size: 128, checkpoint_every: 0, seed: 0}
    attacks:                  # list
      - {name: fgsm, epsilon: 0.1}                  # steps 1, step = epsilon
      - {name: bim, epsilon: 0.1, steps: 10}        # step = epsilon/steps
    eval:
      proxies: [ids] (all models)
      targets: [ids] (all models)
      eval_size: null         # stratified test subset; null = full test split
      batch_size: 128
      include_self: true
    sweep:                    # optional
      sizes: [[2,2], ...]
      epochs: [5, 10, ...]
      seeds: [0]
      baselines: []
      stem_channels: 64
    profile: {batch_size: 32, repetitions: 7}       # optional
    output_dir: path ("runs")
    workers: 1
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import yaml

from .attacks import AttackConfig
from .errors import ConfigValidationError
from .models import BASELINE_NAMES, MultiTrackConfig
from .records import config_digest
from .training import TrainConfig

DATA_ROOT_ENV = "TRANSFERLAB_DATA_ROOT"

_TRAIN_DEFAULTS = {
    "epochs": 30,
    "learning_rate": 0.01,
    "momentum": 0.9,
    "weight_decay": 1e-4,
    "batch_size": 128,
    "checkpoint_every": 0,
    "seed": 0,
}

_ATTACK_DEFAULTS = {"fgsm": {"steps": 1}, "bim": {"steps": 10}}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, normalized experiment description."""

    data: dict
    models: tuple
    train: dict
    attacks: tuple
    eval: dict
    sweep: Optional[dict]
    profile: Optional[dict]
    output_dir: str
    workers: int

    def digest(self) -> str:
        return config_digest(self.to_dict())

    def to_dict(self) -> dict:
        return {
            "data": self.data,
            "models": list(self.models),
            "train": self.train,
            "attacks": list(self.attacks),
            "eval": self.eval,
            "sweep": self.sweep,
            "profile": self.profile,
            "output_dir": self.output_dir,
            "workers": self.workers,
        }

    # typed views -----------------------------------------------------------
    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def attack_configs(self) -> list[AttackConfig]:
        return [AttackConfig.from_dict(a) for a in self.attacks]

    def model_config(self, model_id: str) -> dict:
        for m in self.models:
            if m["id"] == model_id:
                return m
        raise KeyError(f"no model with id {model_id!r}")


def _require(section: dict, key: str, typ, problems: list, where: str, default=None):
    value = section.get(key, default)
    if value is None:
        problems.append(f"{where}.{key}: required")
        return None
    if typ is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, typ):
        problems.append(f"{where}.{key}: expected {typ.__name__}, got {type(value).__name__}")
        return None
    return value


def _normalize_model(entry: Any, i: int, problems: list) -> Optional[dict]:
    where = f"models[{i}]"
    if not isinstance(entry, dict):
        problems.append(f"{where}: expected a mapping")
        return None
    mid = entry.get("id")
    kind = entry.get("kind")
    if not isinstance(mid, str) or not mid:
        problems.append(f"{where}.id: required string")
    if kind == "multitrack":
        try:
            cfg = MultiTrackConfig(
                depth=entry.get("depth", 3),
                width=entry.get("width", 4),
                stem_channels=entry.get("stem_channels", 64),
                num_classes=entry.get("num_classes", 10),
            )
        except (ValueError, TypeError) as exc:
            problems.append(f"{where}: {exc}")
            return None
        out = cfg.to_dict()
    elif kind in BASELINE_NAMES:
        out = {"kind": kind, "num_classes": entry.get("num_classes", 10)}
    else:
        problems.append(
            f"{where}.kind: {kind!r} is not multitrack or one of {list(BASELINE_NAMES)}"
        )
        return None
    out["id"] = mid
    out["seed"] = entry.get("seed", 0)
    if not isinstance(out["seed"], int):
        problems.append(f"{where}.seed: expected int")
    return out


def _normalize_attack(entry: Any, i: int, problems: list) -> Optional[dict]:
    where = f"attacks[{i}]"
    if not isinstance(entry, dict):
        problems.append(f"{where}: expected a mapping")
        return None
    name = entry.get("name")
    if name not in _ATTACK_DEFAULTS:
        problems.append(f"{where}.name: {name!r} is not one of {sorted(_ATTACK_DEFAULTS)}")
        return None
    merged = {
        "name": name,
        "epsilon": float(entry.get("epsilon", 0.1)),
        "steps": int(entry.get("steps", _ATTACK_DEFAULTS[name]["steps"])),
        "step_size": entry.get("step_size"),
        "loss": entry.get("loss", "cross_entropy"),
        "random_start": bool(entry.get("random_start", False)),
    }
    try:
        return AttackConfig.from_dict(merged).to_dict()
    except (ValueError, TypeError) as exc:
        problems.append(f"{where}: {exc}")
        return None


def validate_config(raw: dict) -> ExperimentConfig:
    """Normalize and validate a raw config mapping.

    Raises :class:`ConfigValidationError` carrying every problem at once.
    """
    if not isinstance(raw, dict):
        raise ConfigValidationError(["config must be a mapping"])
    problems: list[str] = []

    known = {"data", "models", "train", "attacks", "eval", "sweep",
             "profile", "output_dir", "workers"}
    for key in raw:
        if key not in known:
            problems.append(f"{key}: unknown section")

    data_raw = raw.get("data") or {}
    if not isinstance(data_raw, dict):
        problems.append("data: expected a mapping")
        data_raw = {}
    root = data_raw.get("root") or os.environ.get(DATA_ROOT_ENV)
    if not root:
        problems.append(f"data.root: required (or set ${DATA_ROOT_ENV})")
    fraction = data_raw.get("subsample_fraction", 1.0)
    if not isinstance(fraction, (int, float)) or not (0 < float(fraction) <= 1):
        problems.append(f"data.subsample_fraction: must be in (0, 1], got {fraction}")
    synthetic = data_raw.get("synthetic")
    if synthetic is not None:
        if not isinstance(synthetic, dict) or not all(
            isinstance(synthetic.get(k), int) for k in ("train_size", "test_size")
        ):
            problems.append("data.synthetic: needs integer train_size and test_size")
        else:
            synthetic = {
                "train_size": synthetic["train_size"],
                "test_size": synthetic["test_size"],
                "seed": synthetic.get("seed", 0),
            }
    data = {
        "root": str(root) if root else "",
        "subsample_fraction": float(fraction) if isinstance(fraction, (int, float)) else 1.0,
        "seed": data_raw.get("seed", 0),
        "synthetic": synthetic,
    }

    models_raw = raw.get("models") or []
    if not isinstance(models_raw, list) or not models_raw:
        problems.append("models: at least one model is required")
        models_raw = []
    models = [m for m in (_normalize_model(e, i, problems) for i, e in enumerate(models_raw)) if m]
    ids = [m["id"] for m in models]
    for dup in {i for i in ids if ids.count(i) > 1}:
        problems.append(f"models: duplicate id {dup!r}")

    train_raw = dict(_TRAIN_DEFAULTS, **(raw.get("train") or {}))
    extra = set(train_raw) - set(_TRAIN_DEFAULTS)
    for key in extra:
        problems.append(f"train.{key}: unknown field")
        train_raw.pop(key)
    try:
        train = TrainConfig(**{k: train_raw[k] for k in _TRAIN_DEFAULTS}).to_dict()
    except (ValueError, TypeError) as exc:
        problems.append(f"train: {exc}")
        train = dict(_TRAIN_DEFAULTS)

    attacks_raw = raw.get("attacks")
    if attacks_raw is None:
        attacks_raw = [{"name": "fgsm"}, {"name": "bim"}]
    if not isinstance(attacks_raw, list) or not attacks_raw:
        problems.append("attacks: expected a non-empty list")
        attacks_raw = []
    attacks = [a for a in (_normalize_attack(e, i, problems) for i, e in enumerate(attacks_raw)) if a]

    eval_raw = raw.get("eval") or {}
    if not isinstance(eval_raw, dict):
        problems.append("eval: expected a mapping")
        eval_raw = {}
    eval_size = eval_raw.get("eval_size")
    if eval_size is not None and (not isinstance(eval_size, int) or eval_size < 1):
        problems.append(f"eval.eval_size: expected positive int or null, got {eval_size}")
    proxies = eval_raw.get("proxies", ids)
    targets = eval_raw.get("targets", ids)
    for group_name, group in (("proxies", proxies), ("targets", targets)):
        if not isinstance(group, list):
            problems.append(f"eval.{group_name}: expected a list of model ids")
            continue
        for mid in group:
            if mid not in ids:
                problems.append(f"eval.{group_name}: unknown model id {mid!r}")
    eval_section = {
        "proxies": list(proxies) if isinstance(proxies, list) else [],
        "targets": list(targets) if isinstance(targets, list) else [],
        "eval_size": eval_size,
        "batch_size": eval_raw.get("batch_size", 128),
        "include_self": bool(eval_raw.get("include_self", True)),
    }

    sweep = raw.get("sweep")
    if sweep is not None:
        if not isinstance(sweep, dict):
            problems.append("sweep: expected a mapping")
            sweep = None
        else:
            sizes = sweep.get("sizes", [[2, 2], [2, 3], [2, 4], [2, 5],
                                        [3, 2], [3, 3], [3, 4], [3, 5],
                                        [4, 2], [4, 3], [4, 4], [4, 5],
                                        [5, 2], [5, 3], [5, 4], [5, 5]])
            epochs = sweep.get("epochs", [5, 10, 15, 20, 25, 30, 35, 40, 45, 50])
            seeds = sweep.get("seeds", [0])
            baselines = sweep.get("baselines", [])
            for name in baselines:
                if name not in BASELINE_NAMES:
                    problems.append(f"sweep.baselines: unknown baseline {name!r}")
            try:
                for d, w in sizes:
                    MultiTrackConfig(depth=int(d), width=int(w))
            except (TypeError, ValueError) as exc:
                problems.append(f"sweep.sizes: {exc}")
            sweep = {
                "sizes": [list(map(int, s)) for s in sizes],
                "epochs": [int(e) for e in epochs],
                "seeds": [int(s) for s in seeds],
                "baselines": list(baselines),
                "stem_channels": int(sweep.get("stem_channels", 64)),
            }

    profile = raw.get("profile")
    if profile is not None:
        if not isinstance(profile, dict):
            problems.append("profile: expected a mapping")
            profile = None
        else:
            profile = {
                "batch_size": int(profile.get("batch_size", 32)),
                "repetitions": int(profile.get("repetitions", 7)),
            }
            if profile["repetitions"] < 5:
                problems.append("profile.repetitions: must be >= 5")

    workers = raw.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        problems.append(f"workers: expected positive int, got {workers}")
        workers = 1

    if problems:
        raise ConfigValidationError(problems)

    return ExperimentConfig(
        data=data,
        models=tuple(models),
        train=train,
        attacks=tuple(attacks),
        eval=eval_section,
        sweep=sweep,
        profile=profile,
        output_dir=str(raw.get("output_dir", "runs")),
        workers=workers,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigValidationError([f"config file not found: {path}"])
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    return validate_config(raw)
