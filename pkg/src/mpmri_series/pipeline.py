"""End-to-end steps shared by the CLI and the experiment harness."""
from __future__ import annotations

import dataclasses
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from mpmri_series.evaluation import (MetricsReport, collapse_dwi, confusion, confusion_to_text,
                                     format_report, macro_report, plot_confusion, write_report_json)
from mpmri_series.inference import Ensemble, EnsemblePrediction, predict_study
from mpmri_series.ingest import Study
from mpmri_series.models import ClassifierConfig
from mpmri_series.preprocess import PreprocessConfig
from mpmri_series.training import (FoldPlan, ModelCheckpoint, SeriesStore, TrainConfig, TrainingError,
                                   train_fold)

logger = logging.getLogger(__name__)


def studies_of_patients(studies: Sequence[Study], patients) -> list[Study]:
    keep = set(patients)
    return [s for s in studies if s.patient_id in keep]


def train_folds(studies: Sequence[Study], plan: FoldPlan, train_config: TrainConfig,
                model_config: ClassifierConfig, preprocess: PreprocessConfig,
                folds: Sequence[int] | None = None, checkpoint_dir: str | Path | None = None,
                log_dir: str | Path | None = None) -> list[ModelCheckpoint]:
    # the test split never enters the store, so training cannot touch it
    cv_studies = studies_of_patients(studies, plan.cv_patients)
    store = SeriesStore(cv_studies, preprocess)
    out = []
    for k in (range(len(plan.folds)) if folds is None else folds):
        log = Path(log_dir) / f"train_fold{k}.tsv" if log_dir is not None else None
        try:
            ck = train_fold(k, plan, train_config, store, model_config, epoch_log=log)
        except Exception as e:
            raise TrainingError(f"fold {k} failed: {e}") from e
        if checkpoint_dir is not None:
            ck.save(checkpoint_dir)
        out.append(ck)
    return out


@dataclasses.dataclass
class Evaluation:
    predictions: list[EnsemblePrediction]
    true_labels: np.ndarray
    predicted_labels: np.ndarray
    study_uids: list[str]
    b_values: list[float | None]
    report: MetricsReport
    report_dwi_collapsed: MetricsReport


def evaluate_studies(studies: Sequence[Study], ensemble: Ensemble,
                     preprocess: PreprocessConfig | None = None) -> Evaluation:
    preds, truth, sids, bvals = [], [], [], []
    labels = {v.series_uid: v.label for s in studies for v in s.series}
    for study in studies:
        for p in predict_study(study, ensemble, preprocess):
            if labels.get(p.series_uid) is None:
                continue
            preds.append(p)
            truth.append(int(labels[p.series_uid]))
            sids.append(study.study_uid)
            bvals.append(p.b_value)
    t = np.array(truth, dtype=np.int64)
    y = np.array([int(p.predicted) for p in preds], dtype=np.int64)
    report = macro_report(confusion(t, y))
    tc, yc = collapse_dwi(t, y, sids, bvals)
    return Evaluation(preds, t, y, sids, bvals, report, macro_report(confusion(tc, yc)))


def write_evaluation(ev: Evaluation, report_dir: str | Path, seed: int, title: str = "") -> None:
    d = Path(report_dir)
    d.mkdir(parents=True, exist_ok=True)
    extra = {"seed": seed, "n_series": int(ev.true_labels.size)}
    write_report_json(ev.report, d / "metrics.json", extra)
    write_report_json(ev.report_dwi_collapsed, d / "metrics_dwi_collapsed.json", extra)
    (d / "metrics.txt").write_text(f"# seed={seed}\n" + format_report(ev.report), encoding="utf-8")
    (d / "metrics_dwi_collapsed.txt").write_text(
        f"# seed={seed} (one DWI series per study)\n" + format_report(ev.report_dwi_collapsed), encoding="utf-8")
    (d / "confusion.tsv").write_text(f"# seed={seed}\n" + confusion_to_text(ev.report.confusion),
                                     encoding="utf-8")
    plot_confusion(ev.report.confusion, d / "confusion.png", title=title or f"seed {seed}")
