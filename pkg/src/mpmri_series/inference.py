"""Fold-ensemble prediction and hanging-protocol ordering."""
from __future__ import annotations

import dataclasses
import logging
import os
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from mpmri_series.ingest import Study
from mpmri_series.labels import TOKENS, SeriesLabel
from mpmri_series.models import forward, softmax
from mpmri_series.preprocess import ModelInput, PreprocessConfig, preprocess_chain
from mpmri_series.training import ModelCheckpoint

logger = logging.getLogger(__name__)


class CheckpointMismatch(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class EnsemblePrediction:
    series_uid: str
    mean_probabilities: np.ndarray
    predicted: SeriesLabel
    per_fold_probabilities: np.ndarray  # (n_folds, 8)
    study_uid: str = ""
    b_value: float | None = None

    @property
    def per_fold_argmax(self) -> list[int]:
        return [int(i) for i in np.argmax(self.per_fold_probabilities, axis=1)]


@dataclasses.dataclass(frozen=True)
class HangingOrder:
    study_uid: str
    entries: tuple[tuple[str, SeriesLabel], ...]

    @property
    def series_uids(self) -> list[str]:
        return [uid for uid, _ in self.entries]


@dataclasses.dataclass
class Ensemble:
    """Frozen fold models sharing architecture, class order and input shape."""

    models: list[nn.Module]
    class_order: tuple[str, ...] = TOKENS
    preprocess: PreprocessConfig | None = None

    def __len__(self):
        return len(self.models)


def load_ensemble(checkpoints: Sequence[ModelCheckpoint | str | os.PathLike]) -> Ensemble:
    cks = [c if isinstance(c, ModelCheckpoint) else ModelCheckpoint.load(c) for c in checkpoints]
    if not cks:
        raise CheckpointMismatch("no checkpoints given")
    ref = cks[0]
    for c in cks[1:]:
        if tuple(c.class_order) != tuple(ref.class_order):
            raise CheckpointMismatch(
                f"class order of fold {c.fold} {list(c.class_order)} differs from fold {ref.fold} "
                f"{list(ref.class_order)}; refusing to reorder")
        if c.model_config != ref.model_config:
            raise CheckpointMismatch(f"fold {c.fold} architecture/config differs from fold {ref.fold}")
        if c.preprocess != ref.preprocess:
            raise CheckpointMismatch(f"fold {c.fold} preprocessing differs from fold {ref.fold}")
    if tuple(ref.class_order) != TOKENS:
        raise CheckpointMismatch(f"checkpoint class order {list(ref.class_order)} is not {list(TOKENS)}")
    return Ensemble(models=[c.build_model() for c in cks], class_order=tuple(ref.class_order),
                    preprocess=ref.preprocess)


def average_probabilities(per_fold_probabilities) -> tuple[np.ndarray, int]:
    """Componentwise mean of fold probabilities and its argmax (ties go to the lower index)."""
    p = np.asarray(per_fold_probabilities, dtype=np.float64)
    mean = p.mean(axis=0)
    return mean, int(np.argmax(mean))


@torch.no_grad()
def ensemble_predict(inp: ModelInput | np.ndarray, models: Ensemble | Sequence[nn.Module],
                     series_uid: str | None = None, study_uid: str = "",
                     b_value: float | None = None) -> EnsemblePrediction:
    nets = models.models if isinstance(models, Ensemble) else list(models)
    voxels = inp.voxels if isinstance(inp, ModelInput) else np.asarray(inp)
    per_fold = []
    for net in nets:
        net.eval()
        per_fold.append(softmax(forward(net, voxels).double().numpy()[0]))
    per_fold = np.stack(per_fold)
    mean, k = average_probabilities(per_fold)
    uid = series_uid if series_uid is not None else getattr(inp, "series_uid", "")
    return EnsemblePrediction(series_uid=uid, mean_probabilities=mean, predicted=SeriesLabel(k),
                              per_fold_probabilities=per_fold, study_uid=study_uid, b_value=b_value)


def predict_study(study: Study, ensemble: Ensemble, preprocess: PreprocessConfig | None = None,
                  failures: list | None = None) -> list[EnsemblePrediction]:
    """One ensemble prediction per series; a series that fails preprocessing is skipped."""
    config = preprocess or ensemble.preprocess or PreprocessConfig()
    out = []
    for vol in study.series:
        try:
            inp = preprocess_chain(vol, train_mode=False, config=config)
        except Exception as e:
            msg = f"study {study.study_uid}: series {vol.series_uid} failed preprocessing: {e}"
            logger.warning(msg)
            if failures is not None:
                failures.append((vol.series_uid, str(e)))
            continue
        out.append(ensemble_predict(inp, ensemble, vol.series_uid, study.study_uid, vol.b_value))
    return out


def hang(predictions: Sequence[EnsemblePrediction]) -> HangingOrder:
    """Order a study's series by label index, then ascending b-value, then series UID."""
    studies = {p.study_uid for p in predictions}
    if len(studies) > 1:
        raise ValueError(f"predictions span several studies: {sorted(studies)}")
    key = lambda p: (int(p.predicted), p.b_value if p.b_value is not None else -1.0, p.series_uid)  # noqa: E731
    ordered = sorted(predictions, key=key)
    return HangingOrder(study_uid=next(iter(studies), ""),
                        entries=tuple((p.series_uid, p.predicted) for p in ordered))


def write_predictions(predictions: Sequence[EnsemblePrediction], path: str | os.PathLike,
                      seed: int | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        if seed is not None:
            f.write(f"# seed={seed}\n")
        f.write("\t".join(["series_uid", "predicted", *[f"p_{t}" for t in TOKENS], "fold_argmax"]) + "\n")
        for p in predictions:
            probs = [f"{v:.6f}" for v in p.mean_probabilities]
            folds = ",".join(SeriesLabel(i).token for i in p.per_fold_argmax)
            f.write("\t".join([p.series_uid, p.predicted.token, *probs, folds]) + "\n")


def read_predictions(path: str | os.PathLike) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if not ln.startswith("#")]
    header = lines[0].split("\t")
    for ln in lines[1:]:
        rec = dict(zip(header, ln.split("\t")))
        rows.append({
            "series_uid": rec["series_uid"],
            "predicted": SeriesLabel.from_token(rec["predicted"]),
            "mean_probabilities": np.array([float(rec[f"p_{t}"]) for t in TOKENS]),
            "fold_argmax": [SeriesLabel.from_token(t) for t in rec["fold_argmax"].split(",")],
        })
    return rows


def write_hanging_order(order: HangingOrder, path: str | os.PathLike, seed: int | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# study_uid={order.study_uid}" + (f" seed={seed}" if seed is not None else "") + "\n")
        for pos, (uid, label) in enumerate(order.entries, 1):
            f.write(f"{pos}\t{uid}\t{label.token}\n")


def read_hanging_order(path: str | os.PathLike) -> list[tuple[str, SeriesLabel]]:
    out = []
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        if ln.startswith("#") or not ln.strip():
            continue
        _, uid, token = ln.split("\t")
        out.append((uid, SeriesLabel.from_token(token)))
    return out

