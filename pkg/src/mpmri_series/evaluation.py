"""Confusion matrices, one-vs-rest metrics with macro totals, and their renderings."""
from __future__ import annotations

import dataclasses
import json
import os
from typing import Mapping, Sequence

import numpy as np

from mpmri_series.labels import NUM_CLASSES, SeriesLabel

METRICS = ("precision", "sensitivity", "specificity", "f1")
_HEADERS = {"precision": "Precision", "sensitivity": "Sensitivity", "specificity": "Specificity",
            "f1": "F1 score"}


def confusion(true_labels, predicted_labels, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """counts[i, j] = number of samples with truth i predicted as j."""
    t = np.asarray(true_labels, dtype=np.int64).ravel()
    p = np.asarray(predicted_labels, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.size} true labels vs {p.size} predictions")
    if t.size and (t.min() < 0 or p.min() < 0 or t.max() >= num_classes or p.max() >= num_classes):
        raise ValueError(f"labels must lie in 0..{num_classes - 1}")
    return np.bincount(t * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)


@dataclasses.dataclass(frozen=True)
class ClassMetrics:
    precision: float
    sensitivity: float
    specificity: float
    f1: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    degenerate: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {m: getattr(self, m) for m in METRICS}


def _ratio(num, den):
    return (num / den, False) if den else (0.0, True)


def class_metrics(cm, class_index: int) -> ClassMetrics:
    """One-vs-rest metrics for one class; any 0/0 cell becomes 0 and is named in ``degenerate``."""
    cm = np.asarray(cm)
    i = int(class_index)
    tp = int(cm[i, i])
    fp = int(cm[:, i].sum()) - tp
    fn = int(cm[i, :].sum()) - tp
    tn = int(cm.sum()) - tp - fp - fn
    precision, d_p = _ratio(tp, tp + fp)
    sensitivity, d_s = _ratio(tp, tp + fn)
    specificity, d_sp = _ratio(tn, tn + fp)
    f1, d_f = _ratio(2 * precision * sensitivity, precision + sensitivity)
    flags = tuple(name for name, d in zip(METRICS, (d_p, d_s, d_sp, d_f)) if d)
    return ClassMetrics(precision, sensitivity, specificity, f1, tp, fp, fn, tn, flags)


@dataclasses.dataclass(frozen=True)
class MetricsReport:
    per_class: tuple[ClassMetrics, ...]
    macro: dict
    confusion: np.ndarray
    class_names: tuple[str, ...]
    weighting: str = "macro"

    def to_dict(self) -> dict:
        return {
            "weighting": self.weighting,
            "classes": [
                {"class": name, **m.as_dict(), "tp": m.tp, "fp": m.fp, "fn": m.fn, "tn": m.tn,
                 "degenerate": list(m.degenerate)}
                for name, m in zip(self.class_names, self.per_class)
            ],
            "total": dict(self.macro),
            "confusion": self.confusion.tolist(),
        }


def macro_report(cm, class_names: Sequence[str] | None = None, weighted: bool = False) -> MetricsReport:
    """Per-class metrics plus their unweighted mean (support-weighted with ``weighted=True``)."""
    cm = np.asarray(cm, dtype=np.int64)
    n = cm.shape[0]
    names = tuple(class_names) if class_names else tuple(SeriesLabel(i).token for i in range(n))
    per_class = tuple(class_metrics(cm, i) for i in range(n))
    if weighted:
        support = cm.sum(axis=1).astype(np.float64)
        w = support / support.sum() if support.sum() else np.full(n, 1.0 / n)
    else:
        w = np.full(n, 1.0 / n)
    macro = {m: float(sum(wi * getattr(c, m) for wi, c in zip(w, per_class))) for m in METRICS}
    return MetricsReport(per_class, macro, cm, names, "weighted" if weighted else "macro")


def _pct(v: float) -> str:
    return f"{100.0 * v:.2f}"


def format_row(name: str, values: Mapping[str, float], width: int = 10, marks: Sequence[str] = ()) -> str:
    cells = [(_pct(values[m]) + ("*" if m in marks else "")).rjust(12) for m in METRICS]
    return name.ljust(width) + "".join(cells)


def format_report(report: MetricsReport) -> str:
    """Per-class rows in label order then the Total row, percentages to 2 decimals."""
    width = max(10, max(len(n) for n in report.class_names) + 2)
    lines = ["Series".ljust(width) + "".join(_HEADERS[m].rjust(12) for m in METRICS)]
    lines.append("-" * len(lines[0]))
    for name, m in zip(report.class_names, report.per_class):
        lines.append(format_row(name, m.as_dict(), width))
    lines.append("-" * len(lines[0]))
    lines.append(format_row("Total", report.macro, width))
    return "\n".join(lines) + "\n"


def compare_models(report_a: MetricsReport, report_b: MetricsReport,
                   names: tuple[str, str] = ("model A", "model B")) -> str:
    """Side-by-side total rows; ``*`` marks the strictly better value in each column."""
    if report_a.class_names != report_b.class_names:
        raise ValueError("reports use different class orders")
    marks_a, marks_b = [], []
    for m in METRICS:
        a, b = round(report_a.macro[m], 12), round(report_b.macro[m], 12)
        if a > b:
            marks_a.append(m)
        elif b > a:
            marks_b.append(m)
    width = max(10, max(len(n) for n in names) + 2)
    lines = ["Model".ljust(width) + "".join(_HEADERS[m].rjust(12) for m in METRICS)]
    lines.append("-" * len(lines[0]))
    lines.append(format_row(names[0], report_a.macro, width, marks_a))
    lines.append(format_row(names[1], report_b.macro, width, marks_b))
    return "\n".join(lines) + "\n"


def comparison_marks(table: str) -> list[list[bool]]:
    """Per data row of a comparison table, which metric columns carry the best mark."""
    rows = table.strip().splitlines()[2:]
    return [[cell.endswith("*") for cell in row.split()[-len(METRICS):]] for row in rows]


def write_report_json(report: MetricsReport, path: str | os.PathLike, extra: dict | None = None) -> None:
    d = report.to_dict()
    if extra:
        d.update(extra)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(d, f, indent=2, sort_keys=True)
        f.write("\n")


def confusion_to_text(cm, short_names: bool = True, delimiter: str = "\t") -> str:
    cm = np.asarray(cm)
    names = [SeriesLabel(i).short if short_names else SeriesLabel(i).token for i in range(cm.shape[0])]
    lines = [delimiter.join(["true\\pred", *names])]
    for name, row in zip(names, cm):
        lines.append(delimiter.join([name, *map(str, row.tolist())]))
    return "\n".join(lines) + "\n"


def plot_confusion(cm, path: str | os.PathLike, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cm = np.asarray(cm)
    names = [SeriesLabel(i).short for i in range(cm.shape[0])]
    fig, ax = plt.subplots(figsize=(6, 5.5))
    ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    thresh = cm.max() / 2 if cm.size and cm.max() else 0
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center",
                    color="white" if cm[i, j] > thresh else "black", fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    # fixed metadata keeps the image byte-reproducible
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def largest_off_diagonal(cm) -> tuple[int, int]:
    cm = np.array(cm, dtype=np.int64)
    np.fill_diagonal(cm, -1)
    i, j = np.unravel_index(int(np.argmax(cm)), cm.shape)
    return int(i), int(j)


def collapse_dwi(true_labels, predicted_labels, study_uids, b_values):
    """Keep only the lowest-b DWI series (by truth) per study, dropping multi-b duplicates."""
    keep = []
    seen: dict[str, tuple[float, int]] = {}
    for k, (t, s, b) in enumerate(zip(true_labels, study_uids, b_values)):
        if int(t) != SeriesLabel.DWI:
            keep.append(k)
            continue
        b = float(b) if b is not None else 0.0
        if s not in seen or b < seen[s][0]:
            seen[s] = (b, k)
    keep.extend(k for _, k in seen.values())
    keep.sort()
    t = np.asarray(true_labels)[keep]
    p = np.asarray(predicted_labels)[keep]
    return t, p
