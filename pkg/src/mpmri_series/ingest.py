"""DICOM study ingestion: slice parsing, axial filtering and volume assembly."""
from __future__ import annotations

import collections
import dataclasses
import json
import logging
import os
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pydicom
from pydicom.errors import InvalidDicomError

from mpmri_series.labels import SeriesLabel

logger = logging.getLogger(__name__)

AXIAL_THRESHOLD = 0.9
UNIT_NORM_TOL = 1e-3
GAP_TOLERANCE = 1.5
BODY_REGIONS = ("chest", "chest+abd", "abd", "abd+pelvis", "pelvis")

# Siemens stores the b-value privately when the standard attribute is absent
_SIEMENS_B_VALUE = (0x0019, 0x100C)


class IngestError(ValueError):
    pass


@dataclasses.dataclass
class DicomSlice:
    patient_id: str
    study_uid: str
    series_uid: str
    instance_number: int
    image_position: tuple[float, float, float]
    orientation_cosines: tuple[float, ...]
    pixel_spacing: tuple[float, float]
    slice_spacing: float
    pixels: np.ndarray
    b_value: float | None = None
    series_description: str = ""
    body_part: str = ""
    path: str = ""


@dataclasses.dataclass(frozen=True)
class SeriesVolume:
    """A 3D series; voxels are indexed (row, column, slice) and spacing follows those axes."""

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    patient_id: str = ""
    study_uid: str = ""
    series_uid: str = ""
    b_value: float | None = None
    label: SeriesLabel | None = None
    warnings: tuple[str, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.voxels.shape)


@dataclasses.dataclass(frozen=True)
class Study:
    study_uid: str
    patient_id: str
    series: tuple[SeriesVolume, ...]
    body_region: str | None = None

    def __post_init__(self):
        for s in self.series:
            if s.study_uid != self.study_uid or s.patient_id != self.patient_id:
                raise IngestError(
                    f"series {s.series_uid} belongs to study {s.study_uid}/{s.patient_id}, "
                    f"not {self.study_uid}/{self.patient_id}"
                )
        if self.body_region is not None and self.body_region not in BODY_REGIONS:
            raise IngestError(f"unknown body region {self.body_region!r}")


@dataclasses.dataclass
class IngestReport:
    files_seen: int = 0
    non_dicom_skipped: int = 0
    studies: int = 0
    series: int = 0
    exclusions: dict[str, list[str]] = dataclasses.field(default_factory=dict)
    warnings: list[str] = dataclasses.field(default_factory=list)

    def exclude(self, reason: str, series_uid: str) -> None:
        self.exclusions.setdefault(reason, []).append(series_uid)

    def warn(self, message: str) -> None:
        logger.warning(message)
        self.warnings.append(message)

    def to_dict(self) -> dict:
        return {
            "files_seen": self.files_seen,
            "non_dicom_skipped": self.non_dicom_skipped,
            "studies": self.studies,
            "series": self.series,
            "exclusions": {k: sorted(v) for k, v in sorted(self.exclusions.items())},
            "exclusion_counts": {k: len(v) for k, v in sorted(self.exclusions.items())},
            "warnings": list(self.warnings),
        }


def write_ingest_report(report: IngestReport, path: str | os.PathLike, seed: int | None = None) -> None:
    d = report.to_dict()
    if seed is not None:
        d["seed"] = seed
    Path(path).write_text(json.dumps(d, indent=2) + "\n", encoding="utf-8")


def read_labels_manifest(path: str | os.PathLike) -> dict[str, SeriesLabel]:
    """Parse ``series_uid<TAB>label`` lines; blank lines and ``#`` comments are ignored."""
    labels: dict[str, SeriesLabel] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise IngestError(f"{path}:{lineno}: expected 'series_uid<TAB>label', got {line!r}")
            uid, token = parts[0].strip(), parts[1].strip()
            try:
                labels[uid] = SeriesLabel.from_token(token)
            except ValueError as e:
                raise IngestError(f"{path}:{lineno}: {e}") from None
    return labels


def write_labels_manifest(labels: Mapping[str, SeriesLabel], path: str | os.PathLike,
                          comment: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        if comment:
            f.write(f"# {comment}\n")
        for uid in sorted(labels):
            f.write(f"{uid}\t{SeriesLabel(labels[uid]).token}\n")


def _check_cosines(cosines: Sequence[float], series_uid: str = "") -> np.ndarray:
    c = np.asarray(cosines, dtype=np.float64)
    if c.shape != (6,):
        raise IngestError(f"series {series_uid}: orientation needs 6 direction cosines, got {c.shape}")
    for name, triple in (("row", c[:3]), ("column", c[3:])):
        n = np.linalg.norm(triple)
        if abs(n - 1.0) > UNIT_NORM_TOL:
            raise IngestError(f"series {series_uid}: {name} direction cosine has norm {n:.6f}, expected 1")
    return c


def slice_normal(cosines: Sequence[float]) -> np.ndarray:
    c = np.asarray(cosines, dtype=np.float64)
    return np.cross(c[:3], c[3:])


def is_axial(orientation_cosines: Sequence[float], series_uid: str = "") -> bool:
    c = _check_cosines(orientation_cosines, series_uid)
    return bool(abs(slice_normal(c)[2]) >= AXIAL_THRESHOLD)


def classify_dwi_bucket(b_value: float) -> str:
    """Bucket a diffusion weighting: low [0, 200], intermediate (200, 800], high above."""
    if b_value < 0:
        raise IngestError(f"b-value must be non-negative, got {b_value}")
    if b_value <= 200:
        return "low"
    if b_value <= 800:
        return "intermediate"
    if b_value > 1400:
        logger.warning("b-value %s above 1400 s/mm^2; assigning 'high'", b_value)
    return "high"


def assemble_volume(slices: Sequence[DicomSlice]) -> SeriesVolume:
    if len(slices) < 2:
        raise IngestError(f"need at least 2 slices to assemble a volume, got {len(slices)}")
    first = slices[0]
    uid = first.series_uid
    for s in slices[1:]:
        if s.series_uid != uid:
            raise IngestError(f"mixed series in one volume: {uid} and {s.series_uid}")
        if s.pixels.shape != first.pixels.shape:
            raise IngestError(
                f"series {uid}: inconsistent in-plane shape {s.pixels.shape} (instance "
                f"{s.instance_number}) vs {first.pixels.shape} (instance {first.instance_number})"
            )
        if not np.allclose(s.pixel_spacing, first.pixel_spacing, rtol=0, atol=1e-6):
            raise IngestError(f"series {uid}: inconsistent pixel spacing {s.pixel_spacing} "
                              f"vs {first.pixel_spacing}")

    normal = slice_normal(first.orientation_cosines)
    pos = np.array([np.dot(normal, s.image_position) for s in slices])
    # tie-break on instance number so the result never depends on input order
    order = sorted(range(len(slices)), key=lambda i: (pos[i], slices[i].instance_number))
    pos = pos[order]
    ordered = [slices[i] for i in order]

    steps = np.diff(pos)
    dup = np.flatnonzero(np.abs(steps) < 1e-4)
    if dup.size:
        pairs = sorted({ordered[i].instance_number for i in dup} | {ordered[i + 1].instance_number for i in dup})
        raise IngestError(f"series {uid}: duplicate slice positions for instance numbers {pairs}")

    median = float(np.median(steps))
    warnings = []
    gaps = np.flatnonzero(steps > GAP_TOLERANCE * median)
    if gaps.size:
        msg = (f"series {uid}: {gaps.size} slice gap(s) larger than {GAP_TOLERANCE}x the median "
               f"spacing {median:.4g} mm")
        logger.warning(msg)
        warnings.append(msg)

    voxels = np.stack([s.pixels for s in ordered], axis=-1)
    return SeriesVolume(
        voxels=voxels,
        spacing=(float(first.pixel_spacing[0]), float(first.pixel_spacing[1]), median),
        patient_id=first.patient_id,
        study_uid=first.study_uid,
        series_uid=uid,
        b_value=first.b_value,
        warnings=tuple(warnings),
    )


def _b_value(ds) -> float | None:
    if "DiffusionBValue" in ds:
        return float(ds.DiffusionBValue)
    if _SIEMENS_B_VALUE in ds:
        v = ds[_SIEMENS_B_VALUE].value
        if isinstance(v, bytes):
            v = v.decode("ascii", "ignore").strip("\x00 ")
        try:
            return float(v[0] if isinstance(v, (list, tuple)) else v)
        except (TypeError, ValueError):
            return None
    return None


def read_slice(path: str | os.PathLike) -> DicomSlice:
    """Parse one Part 10 file. Raises InvalidDicomError for non-DICOM input."""
    ds = pydicom.dcmread(path)
    slope = float(getattr(ds, "RescaleSlope", 1.0) or 1.0)
    intercept = float(getattr(ds, "RescaleIntercept", 0.0) or 0.0)
    pixels = ds.pixel_array.astype(np.float32) * np.float32(slope) + np.float32(intercept)
    if pixels.ndim != 2:
        raise IngestError(f"{path}: expected single-frame 2D pixel data, got shape {pixels.shape}")
    ps = tuple(float(v) for v in ds.PixelSpacing)
    if "SpacingBetweenSlices" in ds and float(ds.SpacingBetweenSlices) > 0:
        slice_spacing = float(ds.SpacingBetweenSlices)
    else:
        slice_spacing = float(getattr(ds, "SliceThickness", 0.0) or 0.0)
    if min(ps) <= 0 or slice_spacing <= 0:
        raise IngestError(f"{path}: non-positive spacing (pixel {ps}, slice {slice_spacing})")
    return DicomSlice(
        patient_id=str(ds.PatientID),
        study_uid=str(ds.StudyInstanceUID),
        series_uid=str(ds.SeriesInstanceUID),
        instance_number=int(getattr(ds, "InstanceNumber", 0) or 0),
        image_position=tuple(float(v) for v in ds.ImagePositionPatient),
        orientation_cosines=tuple(float(v) for v in ds.ImageOrientationPatient),
        pixel_spacing=ps,
        slice_spacing=slice_spacing,
        pixels=pixels,
        b_value=_b_value(ds),
        series_description=str(getattr(ds, "SeriesDescription", "")),
        body_part=str(getattr(ds, "BodyPartExamined", "")),
        path=str(path),
    )


def _walk_files(root: Path) -> Iterable[Path]:
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            yield Path(dirpath) / name


def scan_study_tree(root_path: str | os.PathLike,
                    labels: Mapping[str, SeriesLabel] | None = None,
                    report: IngestReport | None = None) -> list[Study]:
    """Assemble every eligible axial series under ``root_path`` into Studies.

    Non-DICOM files are skipped and counted; a corrupt file drops its series (with a
    warning) but never aborts the scan. Pass ``report`` to collect counts and
    exclusions.
    """
    root = Path(root_path)
    if not root.is_dir() or not os.access(root, os.R_OK | os.X_OK):
        raise IngestError(f"cannot read study tree root {root}")
    report = report if report is not None else IngestReport()
    labels = labels or {}

    by_series: dict[str, list[DicomSlice]] = collections.defaultdict(list)
    broken: set[str] = set()
    for path in _walk_files(root):
        report.files_seen += 1
        try:
            sl = read_slice(path)
        except InvalidDicomError:
            report.non_dicom_skipped += 1
            continue
        except Exception as e:  # corrupt or truncated file
            report.warn(f"unreadable DICOM file {path}: {type(e).__name__}: {e}")
            uid = _series_uid_of(path)
            if uid:
                broken.add(uid)
            else:
                report.exclude("unreadable_file", str(path))
            continue
        by_series[sl.series_uid].append(sl)
    if report.non_dicom_skipped:
        logger.info("skipped %d non-DICOM files under %s", report.non_dicom_skipped, root)

    studies: dict[str, list[SeriesVolume]] = collections.defaultdict(list)
    patients: dict[str, str] = {}
    regions: dict[str, str | None] = {}
    for uid in sorted(set(by_series) | broken):
        if uid in broken:
            report.exclude("unreadable_pixel_data", uid)
            continue
        slices = by_series[uid]
        try:
            if not is_axial(slices[0].orientation_cosines, uid):
                report.exclude("non_axial", uid)
                continue
            vol = assemble_volume(slices)
        except IngestError as e:
            report.warn(str(e))
            report.exclude("assembly_failed", uid)
            continue
        if uid in labels:
            vol = dataclasses.replace(vol, label=labels[uid])
        studies[vol.study_uid].append(vol)
        patients[vol.study_uid] = vol.patient_id
        region = slices[0].body_part.lower().replace("_", "+")
        regions.setdefault(vol.study_uid, region if region in BODY_REGIONS else None)

    out = []
    for study_uid in sorted(studies):
        series = tuple(sorted(studies[study_uid], key=lambda v: v.series_uid))
        out.append(Study(study_uid=study_uid, patient_id=patients[study_uid], series=series,
                         body_region=regions[study_uid]))
    report.studies = len(out)
    report.series = sum(len(s.series) for s in out)
    return out


def _series_uid_of(path: Path) -> str | None:
    """Best-effort series UID of a file whose pixel data could not be decoded."""
    try:
        ds = pydicom.dcmread(path, stop_before_pixels=True, specific_tags=["SeriesInstanceUID"])
        return str(ds.SeriesInstanceUID)
    except Exception:
        return None
