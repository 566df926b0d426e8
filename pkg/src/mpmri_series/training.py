"""Patient-level fold planning and the per-fold training loop."""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import os
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn

from mpmri_series.ingest import Study
from mpmri_series.labels import TOKENS
from mpmri_series.models import ClassifierConfig, build_classifier, mean_cross_entropy
from mpmri_series.preprocess import PreprocessConfig, augment_rot90, prepare
from mpmri_series.seeding import substream, substream_seed

logger = logging.getLogger(__name__)

N_FOLDS = 5
MIN_PATIENTS = 10


class TrainingError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class FoldSplit:
    train_patients: tuple[str, ...]
    val_patients: tuple[str, ...]


@dataclasses.dataclass(frozen=True)
class FoldPlan:
    folds: tuple[FoldSplit, ...]
    test_patients: tuple[str, ...]
    seed: int
    test_fraction: float

    @property
    def cv_patients(self) -> tuple[str, ...]:
        return tuple(sorted(p for f in self.folds for p in f.val_patients))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "test_fraction": self.test_fraction,
            "test_patients": list(self.test_patients),
            "folds": [
                {"fold": i, "train_patients": list(f.train_patients), "val_patients": list(f.val_patients)}
                for i, f in enumerate(self.folds)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        folds = tuple(FoldSplit(tuple(f["train_patients"]), tuple(f["val_patients"])) for f in d["folds"])
        return cls(folds=folds, test_patients=tuple(d["test_patients"]), seed=int(d["seed"]),
                   test_fraction=float(d["test_fraction"]))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "FoldPlan":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def make_fold_plan(patients: Iterable, test_fraction: float = 0.18, seed: int = 0,
                   n_folds: int = N_FOLDS) -> FoldPlan:
    """Carve one fixed test set by patient, then split the rest into ``n_folds`` validation groups.

    ``patients`` holds patient ids or ``(patient_id, study_ids)`` pairs. Fold k
    validates on group k and trains on the other groups; the test set is the same
    for every fold.
    """
    ids = sorted({p[0] if isinstance(p, (tuple, list)) else p for p in patients})
    if len(ids) < MIN_PATIENTS:
        raise ValueError(f"need at least {MIN_PATIENTS} patients for a {n_folds}-fold plan, got {len(ids)}")
    if not 0 <= test_fraction < 1:
        raise ValueError(f"test_fraction must be in [0, 1), got {test_fraction}")
    rng = substream(seed, "split")
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    n_test = int(math.floor(test_fraction * len(ids) + 0.5))
    if len(ids) - n_test < n_folds:
        raise ValueError(f"{len(ids)} patients leave {len(ids) - n_test} for cross-validation; "
                         f"need at least {n_folds}")
    test = tuple(sorted(shuffled[:n_test]))
    groups = [tuple(sorted(g)) for g in np.array_split(np.array(shuffled[n_test:], dtype=object), n_folds)]
    folds = []
    for k in range(n_folds):
        train = tuple(sorted(p for j, g in enumerate(groups) if j != k for p in g))
        folds.append(FoldSplit(train_patients=train, val_patients=groups[k]))
    return FoldPlan(folds=tuple(folds), test_patients=test, seed=seed, test_fraction=test_fraction)


def patients_of(studies: Sequence[Study]) -> list[tuple[str, list[str]]]:
    by_patient: dict[str, list[str]] = {}
    for s in studies:
        by_patient.setdefault(s.patient_id, []).append(s.study_uid)
    return sorted((p, sorted(v)) for p, v in by_patient.items())


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 2
    epochs: int = 25
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size <= 0 or self.epochs <= 0 or self.eps <= 0:
            raise ValueError(f"invalid training config {self}")


@dataclasses.dataclass(frozen=True)
class Sample:
    patient_id: str
    study_uid: str
    series_uid: str
    label: int
    b_value: float | None = None


class SeriesStore:
    """Labeled series addressable by patient, with cached deterministic preprocessing.

    Every load is recorded in ``access_log`` (study UIDs) so callers can audit
    which studies a training run touched.
    """

    def __init__(self, studies: Sequence[Study], preprocess: PreprocessConfig | None = None):
        self.preprocess = preprocess or PreprocessConfig()
        self._volumes = {}
        self._by_patient: dict[str, list[Sample]] = {}
        for study in studies:
            for vol in study.series:
                if vol.label is None:
                    continue
                self._volumes[vol.series_uid] = vol
                self._by_patient.setdefault(study.patient_id, []).append(
                    Sample(study.patient_id, study.study_uid, vol.series_uid, int(vol.label), vol.b_value))
        for v in self._by_patient.values():
            v.sort(key=lambda s: (s.study_uid, s.series_uid))
        self._cache: dict[str, np.ndarray] = {}
        self.access_log: list[str] = []

    @property
    def patients(self) -> list[str]:
        return sorted(self._by_patient)

    def samples(self, patients: Iterable[str]) -> list[Sample]:
        out = []
        for p in sorted(set(patients)):
            out.extend(self._by_patient.get(p, ()))
        return out

    def load(self, sample: Sample, train_mode: bool = False,
             rng: np.random.Generator | None = None) -> np.ndarray:
        self.access_log.append(sample.study_uid)
        base = self._cache.get(sample.series_uid)
        if base is None:
            base = prepare(self._volumes[sample.series_uid], self.preprocess)
            self._cache[sample.series_uid] = base
        if train_mode:
            return augment_rot90(base, rng, self.preprocess.rotate_prob).voxels
        return base.voxels


@dataclasses.dataclass
class ModelCheckpoint:
    state_dict: dict
    fold: int
    best_epoch: int
    val_accuracy: float
    seed: int
    model_config: ClassifierConfig | None = None
    preprocess: PreprocessConfig | None = None
    class_order: tuple[str, ...] = TOKENS
    epochs: int = 0

    def manifest(self) -> dict:
        return {
            "architecture": self.model_config.architecture if self.model_config else "custom",
            "config": self.model_config.to_dict() if self.model_config else None,
            "preprocess": dataclasses.asdict(self.preprocess) if self.preprocess else None,
            "class_order": list(self.class_order),
            "fold": self.fold,
            "best_epoch": self.best_epoch,
            "epochs": self.epochs,
            "best_val_accuracy": self.val_accuracy,
            "seed": self.seed,
        }

    def save(self, directory: str | os.PathLike) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict, d / f"fold{self.fold}.pt")
        manifest = d / f"fold{self.fold}.json"
        manifest.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return manifest

    @classmethod
    def load(cls, manifest_path: str | os.PathLike) -> "ModelCheckpoint":
        path = Path(manifest_path)
        m = json.loads(path.read_text(encoding="utf-8"))
        state = torch.load(path.with_suffix(".pt"), map_location="cpu", weights_only=True)
        pre = m.get("preprocess")
        return cls(
            state_dict=state,
            fold=int(m["fold"]),
            best_epoch=int(m["best_epoch"]),
            val_accuracy=float(m["best_val_accuracy"]),
            seed=int(m["seed"]),
            model_config=ClassifierConfig.from_dict(m["config"]) if m.get("config") else None,
            preprocess=PreprocessConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in pre.items()})
            if pre else None,
            class_order=tuple(m["class_order"]),
            epochs=int(m.get("epochs", 0)),
        )

    def build_model(self, factory: Callable[[], nn.Module] | None = None) -> nn.Module:
        """A frozen, eval-mode model carrying this checkpoint's weights."""
        if factory is None:
            if self.model_config is None:
                raise ValueError("checkpoint from a custom model needs an explicit factory")
            model = build_classifier(self.model_config)
        else:
            model = factory()
        model.load_state_dict(self.state_dict)
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        return model


def make_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=config.betas, eps=config.eps)


def training_step(model: nn.Module, optimizer: torch.optim.Optimizer, inputs, targets,
                  config: TrainConfig) -> float:
    """One Adam update on the batch mean cross-entropy; returns the pre-update loss."""
    x = torch.as_tensor(np.asarray(inputs), dtype=torch.float32)
    if x.dim() == 4:
        x = x.unsqueeze(1)
    y = torch.as_tensor(np.asarray(targets), dtype=torch.long)
    if x.shape[0] > config.batch_size:
        raise ValueError(f"batch of {x.shape[0]} exceeds configured batch size {config.batch_size}")
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss = mean_cross_entropy(model(x), y)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()}")
    loss.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise TrainingError(f"non-finite gradient in parameter {name}")
    optimizer.step()
    return float(loss.detach())


@torch.no_grad()
def predict_logits(model: nn.Module, data: SeriesStore, samples: Sequence[Sample],
                   batch_size: int = 8) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(samples), batch_size):
        batch = np.stack([data.load(s) for s in samples[i:i + batch_size]])
        out.append(model(torch.from_numpy(batch).unsqueeze(1)).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, len(TOKENS)))


def validation_accuracy(model: nn.Module, data: SeriesStore, samples: Sequence[Sample]) -> float:
    """Fraction of series whose argmax prediction equals the label."""
    logits = predict_logits(model, data, samples)
    labels = np.array([s.label for s in samples])
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def train_fold(fold: int, plan: FoldPlan, config: TrainConfig, data: SeriesStore,
               model_config: ClassifierConfig | None = None,
               model_factory: Callable[[], nn.Module] | None = None,
               epoch_log: str | os.PathLike | None = None) -> ModelCheckpoint:
    """Train one fold for ``config.epochs`` epochs and keep the best-validation weights.

    Ties in validation accuracy keep the earlier epoch.
    """
    if not 0 <= fold < len(plan.folds):
        raise ValueError(f"fold must be in 0..{len(plan.folds) - 1}, got {fold}")
    split = plan.folds[fold]
    train = data.samples(split.train_patients)
    val = data.samples(split.val_patients)
    if not train or not val:
        raise TrainingError(f"fold {fold}: empty {'training' if not train else 'validation'} set")

    if model_factory is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(substream_seed(config.seed, "init", fold))
            model = model_factory()
    else:
        model_config = model_config or ClassifierConfig()
        model = build_classifier(model_config, seed=substream_seed(config.seed, "init", fold))
    optimizer = make_optimizer(model, config)

    log = None
    if epoch_log is not None:
        Path(epoch_log).parent.mkdir(parents=True, exist_ok=True)
        log = open(epoch_log, "w", encoding="utf-8", newline="\n")
        log.write(f"# fold={fold} seed={config.seed}\nepoch\ttrain_loss\tval_accuracy\n")

    best_acc, best_epoch, best_state = -1.0, 0, None
    try:
        for epoch in range(1, config.epochs + 1):
            order = substream(config.seed, "shuffle", fold, epoch).permutation(len(train))
            aug = substream(config.seed, "augment", fold, epoch)
            losses = []
            for i in range(0, len(order), config.batch_size):
                batch = [train[j] for j in order[i:i + config.batch_size]]
                x = np.stack([data.load(s, train_mode=True, rng=aug) for s in batch])
                y = [s.label for s in batch]
                try:
                    losses.append(training_step(model, optimizer, x, y, config))
                except TrainingError as e:
                    uids = ", ".join(s.series_uid for s in batch)
                    raise TrainingError(f"fold {fold} epoch {epoch}: {e} (batch series: {uids})") from e
            acc = validation_accuracy(model, data, val)
            mean_loss = float(np.mean(losses))
            logger.info("fold %d epoch %d: train loss %.5f, val accuracy %.4f", fold, epoch, mean_loss, acc)
            if log:
                log.write(f"{epoch}\t{mean_loss:.6f}\t{acc:.6f}\n")
            if acc > best_acc:
                best_acc, best_epoch = acc, epoch
                best_state = copy.deepcopy(model.state_dict())
    finally:
        if log:
            log.close()

    return ModelCheckpoint(
        state_dict=best_state,
        fold=fold,
        best_epoch=best_epoch,
        val_accuracy=best_acc,
        seed=config.seed,
        model_config=model_config if model_factory is None else None,
        preprocess=data.preprocess,
        epochs=config.epochs,
    )
