"""Command-line entry point: phantom, ingest, split, train, predict, evaluate, hang."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from mpmri_series import pipeline
from mpmri_series.config import RunConfig, load_config
from mpmri_series.inference import (CheckpointMismatch, hang, load_ensemble, predict_study, write_hanging_order,
                                    write_predictions)
from mpmri_series.ingest import (IngestError, IngestReport, read_labels_manifest, scan_study_tree,
                                 write_ingest_report)
from mpmri_series.phantom import PhantomSpec, generate_studies, write_dicom_tree
from mpmri_series.training import FoldPlan, TrainingError, make_fold_plan, patients_of

logger = logging.getLogger("mpmri_series")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3
PLAN_FILE = "fold_plan.json"
# the tiny network is reachable through a config file only
PUBLIC_ARCHITECTURES = ("densenet121", "resnet50")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--arch", choices=PUBLIC_ARCHITECTURES)
    p.add_argument("--data-root", type=Path)
    p.add_argument("--labels", type=Path, help="series_uid<TAB>label manifest")
    p.add_argument("--checkpoint-dir", type=Path)
    p.add_argument("--report-dir", type=Path)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mpmri-series", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="write a synthetic labeled DICOM tree")
    _common(p)
    p.add_argument("--out", type=Path, help="output tree (defaults to data_root)")
    p.add_argument("--studies", type=int, default=10)
    p.add_argument("--shape", type=int, nargs=3, default=(64, 64, 8), metavar=("ROWS", "COLS", "SLICES"))
    p.add_argument("--dwi-bvalues", type=int, default=2, choices=(1, 2, 3))
    p.add_argument("--noise", type=float, default=0.03)

    for name, help_ in (("ingest", "scan a DICOM tree and write an ingestion report"),
                        ("split", "write the patient-level fold plan")):
        p = sub.add_parser(name, help=help_)
        _common(p)

    p = sub.add_parser("train", help="train the cross-validation folds")
    _common(p)
    p.add_argument("--folds", type=int, help="train only the first N folds (debugging)")
    p.add_argument("--epochs", type=int)

    for name, help_ in (("predict", "write per-series ensemble predictions"),
                        ("evaluate", "metrics and confusion matrix on the held-out test split"),
                        ("hang", "write hanging-protocol orderings")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        if name != "evaluate":
            p.add_argument("--study", type=Path, nargs="+",
                           help="study directories (default: test split of data_root)")
    return parser


def _config(args) -> RunConfig:
    overrides = {
        "seed": args.seed,
        "architecture": args.arch,
        "paths.data_root": str(args.data_root) if args.data_root else None,
        "paths.labels": str(args.labels) if args.labels else None,
        "paths.checkpoint_dir": str(args.checkpoint_dir) if args.checkpoint_dir else None,
        "paths.report_dir": str(args.report_dir) if args.report_dir else None,
        "train.epochs": getattr(args, "epochs", None),
    }
    return load_config(args.config, overrides)


def _require_dir(path, what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is not set (flag or config)")
    p = Path(path)
    if not p.is_dir():
        raise IngestError(f"{what} {p} does not exist")
    return p


def _labels(cfg: RunConfig, required: bool):
    path = cfg.labels_path()
    if path is None or not path.is_file():
        if required:
            raise IngestError(f"labels manifest not found ({path or 'not configured'})")
        return None
    return read_labels_manifest(path)


def _ingest(cfg: RunConfig, labels_required: bool):
    root = _require_dir(cfg.paths.data_root, "data_root")
    labels = _labels(cfg, labels_required)
    report = IngestReport()
    studies = scan_study_tree(root, labels, report)
    return studies, report


def _plan(cfg: RunConfig, studies, create: bool = True) -> FoldPlan:
    path = Path(cfg.paths.checkpoint_dir) / PLAN_FILE
    if path.is_file():
        return FoldPlan.load(path)
    if not create:
        raise IngestError(f"fold plan {path} not found; run 'split' or 'train' first")
    plan = make_fold_plan(patients_of(studies), cfg.test_fraction, cfg.seed, cfg.folds)
    path.parent.mkdir(parents=True, exist_ok=True)
    plan.save(path)
    return plan


def _ensemble(cfg: RunConfig):
    d = _require_dir(cfg.paths.checkpoint_dir, "checkpoint_dir")
    manifests = sorted(d.glob("fold[0-9]*.json"), key=lambda p: int(p.stem[4:]))
    if not manifests:
        raise IngestError(f"no fold checkpoints in {d}")
    return load_ensemble(manifests)


def _target_studies(cfg: RunConfig, args):
    if getattr(args, "study", None):
        studies = []
        for path in args.study:
            studies.extend(scan_study_tree(_require_dir(path, "study directory"), _labels(cfg, False)))
        return studies
    studies, _ = _ingest(cfg, labels_required=False)
    plan = _plan(cfg, studies, create=False)
    return pipeline.studies_of_patients(studies, plan.test_patients)


def cmd_phantom(args, cfg: RunConfig) -> int:
    out = args.out or (Path(cfg.paths.data_root) if cfg.paths.data_root else None)
    if out is None:
        raise UsageError("phantom needs --out or data_root")
    spec = PhantomSpec(num_studies=args.studies, image_shape=tuple(args.shape),
                       num_dwi_bvalues=args.dwi_bvalues, noise_sigma=args.noise, seed=cfg.seed)
    write_dicom_tree(generate_studies(spec), out, seed=cfg.seed)
    print(f"wrote {args.studies} phantom studies to {out}")
    return EXIT_OK


def cmd_ingest(args, cfg: RunConfig) -> int:
    studies, report = _ingest(cfg, labels_required=False)
    d = Path(cfg.paths.report_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_ingest_report(report, d / "ingest_report.json", seed=cfg.seed)
    print(f"{report.studies} studies, {report.series} series, "
          f"{sum(len(v) for v in report.exclusions.values())} exclusions")
    return EXIT_OK


def cmd_split(args, cfg: RunConfig) -> int:
    studies, _ = _ingest(cfg, labels_required=False)
    path = Path(cfg.paths.checkpoint_dir) / PLAN_FILE
    plan = make_fold_plan(patients_of(studies), cfg.test_fraction, cfg.seed, cfg.folds)
    path.parent.mkdir(parents=True, exist_ok=True)
    plan.save(path)
    print(f"fold plan: {len(plan.test_patients)} test patients, "
          f"{[len(f.val_patients) for f in plan.folds]} validation patients per fold -> {path}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    studies, _ = _ingest(cfg, labels_required=True)
    plan = _plan(cfg, studies)
    n = len(plan.folds) if args.folds is None else args.folds
    if not 1 <= n <= len(plan.folds):
        raise UsageError(f"--folds must be in 1..{len(plan.folds)}")
    cks = pipeline.train_folds(studies, plan, cfg.train, cfg.classifier_config(), cfg.preprocess,
                               folds=range(n), checkpoint_dir=cfg.paths.checkpoint_dir,
                               log_dir=cfg.paths.report_dir)
    for ck in cks:
        print(f"fold {ck.fold}: best epoch {ck.best_epoch}, val accuracy {ck.val_accuracy:.4f}")
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig) -> int:
    ens = _ensemble(cfg)
    d = Path(cfg.paths.report_dir) / "predictions"
    d.mkdir(parents=True, exist_ok=True)
    for study in _target_studies(cfg, args):
        write_predictions(predict_study(study, ens), d / f"{study.study_uid}.tsv", seed=cfg.seed)
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    ens = _ensemble(cfg)
    studies, _ = _ingest(cfg, labels_required=True)
    plan = _plan(cfg, studies, create=False)
    test = pipeline.studies_of_patients(studies, plan.test_patients)
    ev = pipeline.evaluate_studies(test, ens)
    pipeline.write_evaluation(ev, cfg.paths.report_dir, cfg.seed, title=f"{cfg.architecture} ensemble")
    print((Path(cfg.paths.report_dir) / "metrics.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_hang(args, cfg: RunConfig) -> int:
    ens = _ensemble(cfg)
    d = Path(cfg.paths.report_dir) / "hanging"
    d.mkdir(parents=True, exist_ok=True)
    for study in _target_studies(cfg, args):
        write_hanging_order(hang(predict_study(study, ens)), d / f"{study.study_uid}.txt", seed=cfg.seed)
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom, "ingest": cmd_ingest, "split": cmd_split, "train": cmd_train,
    "predict": cmd_predict, "evaluate": cmd_evaluate, "hang": cmd_hang,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as e:
        print(f"training failed: {e}", file=sys.stderr)
        return EXIT_TRAINING
    except (IngestError, CheckpointMismatch, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
