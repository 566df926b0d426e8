"""Run configuration: YAML file, overridden by CLI flags, over built-in defaults."""
from __future__ import annotations

import dataclasses
import os
from pathlib import Path
from typing import Any

import yaml

from mpmri_series.models import ClassifierConfig
from mpmri_series.preprocess import PreprocessConfig
from mpmri_series.training import N_FOLDS, TrainConfig


@dataclasses.dataclass(frozen=True)
class Paths:
    data_root: str | None = None
    labels: str | None = None
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    architecture: str = "densenet121"
    paths: Paths = Paths()
    preprocess: PreprocessConfig = PreprocessConfig()
    train: TrainConfig = TrainConfig()
    model: dict = dataclasses.field(default_factory=dict)
    folds: int = N_FOLDS
    test_fraction: float = 0.18

    def classifier_config(self) -> ClassifierConfig:
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in self.model.items()}
        kw.setdefault("input_shape", tuple(self.preprocess.target_shape))
        return ClassifierConfig(architecture=self.architecture, **kw)

    def labels_path(self) -> Path | None:
        if self.paths.labels:
            return Path(self.paths.labels)
        if self.paths.data_root and (Path(self.paths.data_root) / "labels.tsv").is_file():
            return Path(self.paths.data_root) / "labels.tsv"
        return None


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _section(cls, values: dict | None, **extra):
    values = dict(values or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    values.update({k: v for k, v in extra.items() if v is not None})
    return cls(**_tuples(values))


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Build a RunConfig; ``overrides`` uses dotted keys (``train.epochs``) and wins over the file."""
    raw: dict = {}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"config {path} must be a mapping")
        base = Path(path).parent
        for key, value in list((raw.get("paths") or {}).items()):
            if value is not None and not os.path.isabs(str(value)):
                raw["paths"][key] = str(base / value)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    known = {"seed", "architecture", "paths", "preprocess", "train", "model", "folds", "test_fraction"}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    seed = int(raw.get("seed", 0))
    train_raw = dict(raw.get("train") or {})
    train_raw["seed"] = seed
    return RunConfig(
        seed=seed,
        architecture=raw.get("architecture", "densenet121"),
        paths=_section(Paths, raw.get("paths")),
        preprocess=_section(PreprocessConfig, raw.get("preprocess")),
        train=_section(TrainConfig, train_raw),
        model=dict(raw.get("model") or {}),
        folds=int(raw.get("folds", N_FOLDS)),
        test_fraction=float(raw.get("test_fraction", 0.18)),
    )
