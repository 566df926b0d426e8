"""Labeled synthetic mpMRI studies and a DICOM writer for them.

Each study shares one anatomy (body ellipse with a subcutaneous fat rim,
parenchyma, tubular vessels, fluid blobs and lesions) rendered with a tissue
contrast table per series type. Every series gets its own random gain and
offset, so absolute intensity carries no class information; only relative
tissue contrast does. The portal-venous and delayed phases differ only in
parenchymal enhancement amplitude and vessel conspicuity, and their parameter
ranges overlap, so they are the pair a classifier confuses most.
"""
from __future__ import annotations

import dataclasses
import logging
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np
from pydicom.dataset import FileDataset, FileMetaDataset
from pydicom.uid import ExplicitVRLittleEndian, MRImageStorage, generate_uid
from scipy import ndimage

from mpmri_series.ingest import BODY_REGIONS, SeriesVolume, Study, write_labels_manifest
from mpmri_series.labels import SeriesLabel

logger = logging.getLogger(__name__)

AIR, FAT, PARENCHYMA, VESSEL, FLUID, LESION = range(6)
LABELS_MANIFEST = "labels.tsv"

# b-values per bucket, s/mm^2
_B_LOW = (0.0, 50.0, 100.0)
_B_INTERMEDIATE = (400.0, 500.0, 600.0, 800.0)
_B_HIGH = (1000.0, 1200.0, 1400.0)
# relative study counts per body region, used as sampling weights
_REGION_WEIGHTS = np.array([32, 1, 1573, 18, 52], dtype=float)
_UID_PREFIX = "1.2.826.0.1.3680043.8.498."


@dataclasses.dataclass(frozen=True)
class PhantomSpec:
    num_studies: int = 10
    image_shape: tuple[int, int, int] = (64, 64, 8)
    num_dwi_bvalues: int = 2
    noise_sigma: float = 0.03
    seed: int = 0
    spacing: tuple[float, float, float] = (1.5, 1.5, 7.8)

    def __post_init__(self):
        if self.num_studies < 0:
            raise ValueError(f"num_studies must be >= 0, got {self.num_studies}")
        if len(self.image_shape) != 3 or any(int(s) <= 0 for s in self.image_shape):
            raise ValueError(f"image_shape must be 3 positive ints, got {self.image_shape}")
        if self.image_shape[2] < 2:
            raise ValueError("phantom volumes need at least 2 slices")
        if not 1 <= self.num_dwi_bvalues <= 3:
            raise ValueError(f"num_dwi_bvalues must be in 1..3, got {self.num_dwi_bvalues}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")


def patient_index(study_index: int) -> int:
    """Roughly 4 studies per 3 patients, so some patients have follow-up studies."""
    return (3 * study_index) // 4


def b_values_for(n: int) -> tuple[tuple[float, ...], ...]:
    return {1: (_B_HIGH,), 2: (_B_LOW, _B_HIGH), 3: (_B_LOW, _B_INTERMEDIATE, _B_HIGH)}[n]


@dataclasses.dataclass(frozen=True)
class Anatomy:
    tissue: np.ndarray  # int8 tissue code per voxel
    texture: np.ndarray  # smooth multiplicative parenchymal texture
    fat_rim: np.ndarray  # bool

    def mask(self, code: int) -> np.ndarray:
        return self.tissue == code


def _grid(shape):
    r, c, s = (np.arange(n, dtype=np.float64) for n in shape)
    y = (r - (shape[0] - 1) / 2) / (shape[0] / 2)
    x = (c - (shape[1] - 1) / 2) / (shape[1] / 2)
    z = (s - (shape[2] - 1) / 2) / (shape[2] / 2)
    return np.meshgrid(y, x, z, indexing="ij")


def _smooth_field(rng, shape, sigma, amplitude):
    noise = rng.standard_normal(shape)
    field = ndimage.gaussian_filter(noise, sigma=sigma, mode="nearest")
    field /= field.std() + 1e-12
    return 1.0 + amplitude * field


def phantom_anatomy(spec: PhantomSpec, study_index: int) -> Anatomy:
    shape = tuple(int(s) for s in spec.image_shape)
    pat = np.random.default_rng([spec.seed, 1, patient_index(study_index)])
    # follow-up studies of one patient share the anatomy up to small jitter
    jit = np.random.default_rng([spec.seed, 2, study_index])
    y, x, z = _grid(shape)

    ax = pat.uniform(0.72, 0.9) * jit.uniform(0.97, 1.03)
    ay = pat.uniform(0.55, 0.72) * jit.uniform(0.97, 1.03)
    taper = 1.0 - pat.uniform(0.0, 0.12) * z ** 2
    rho = np.sqrt((x / ax) ** 2 + (y / ay) ** 2) / taper
    body = rho <= 1.0
    rim = pat.uniform(0.1, 0.2)
    inner = rho <= 1.0 - rim
    tissue = np.where(body, FAT, AIR).astype(np.int8)
    tissue[inner] = PARENCHYMA

    def place(code, count, r_lo, r_hi, z_lo, z_hi, keep_inside=0.8):
        for _ in range(count):
            r = pat.uniform(r_lo, r_hi)
            ang = pat.uniform(0, 2 * np.pi)
            dist = pat.uniform(0, keep_inside - r)
            cy, cx = dist * np.sin(ang) * ay, dist * np.cos(ang) * ax
            cz = pat.uniform(-0.6, 0.6)
            rz = pat.uniform(z_lo, z_hi)
            blob = ((x - cx) ** 2 + (y - cy) ** 2) / r ** 2 + ((z - cz) / rz) ** 2 <= 1.0
            tissue[blob & inner] = code

    # vessels run through every slice
    for _ in range(int(pat.integers(2, 4))):
        r = pat.uniform(0.07, 0.11)
        cy, cx = pat.uniform(-0.3, 0.4) * ay, pat.uniform(-0.45, 0.45) * ax
        tube = (x - cx) ** 2 + (y - cy) ** 2 <= r ** 2
        tissue[tube & inner] = VESSEL
    place(FLUID, int(pat.integers(1, 4)), 0.08, 0.18, 0.5, 1.2)
    place(LESION, int(pat.integers(1, 4)), 0.06, 0.12, 0.4, 0.9)

    texture = _smooth_field(pat, shape, sigma=(3, 3, 1), amplitude=0.06)
    return Anatomy(tissue=tissue, texture=texture, fat_rim=(tissue == FAT))


def _contrast_table(rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Tissue intensities (air, fat, parenchyma, vessel, fluid, lesion) per series type."""
    j = lambda lo=0.88, hi=1.12: rng.uniform(lo, hi)  # noqa: E731
    t = {}
    t["T1w-pre"] = [0, 1.0 * j(), 0.45 * j(), 0.18 * j(), 0.12 * j(), 0.30 * j()]
    par_art = 0.45 * j()
    t["T1w-art"] = [0, 0.15 * j(), par_art, par_art * rng.uniform(1.7, 2.4), 0.10 * j(), 0.85 * j()]
    par_por = rng.uniform(0.72, 0.9)
    t["T1w-por"] = [0, 0.15 * j(0.85, 1.15), par_por, par_por * rng.uniform(0.62, 0.84),
                    0.12 * j(0.85, 1.15), 0.55 * j(0.85, 1.15)]
    par_del = rng.uniform(0.6, 0.78)
    t["T1w-del"] = [0, 0.15 * j(0.85, 1.15), par_del, par_del * rng.uniform(0.9, 1.1),
                    0.12 * j(0.85, 1.15), 0.55 * j(0.85, 1.15)]
    t["T2"] = [0, 0.75 * j(), 0.28 * j(), 0.05 * j(), 1.0 * j(), 0.6 * j()]
    t["T2FS"] = [0, 0.08 * j(), 0.25 * j(), 0.05 * j(), 1.0 * j(), 0.65 * j()]
    # ADC in 1e-3 mm^2/s and the unweighted DWI signal
    t["ADC"] = [0, 0.3 * j(), 1.1 * j(), 2.2 * j(), 3.0 * j(), 0.75 * j()]
    t["S0"] = [0, 0.1 * j(), 0.55 * j(), 0.08 * j(), 1.0 * j(), 0.75 * j()]
    return {k: np.asarray(v, dtype=np.float64) for k, v in t.items()}


def _rician(rng, signal, sigma):
    if sigma == 0:
        return signal
    return np.sqrt((signal + sigma * rng.standard_normal(signal.shape)) ** 2
                   + (sigma * rng.standard_normal(signal.shape)) ** 2)


def _low_resolution(v):
    """Halve the in-plane resolution by block averaging and nearest upsampling."""
    r, c = v.shape[0] // 2 * 2, v.shape[1] // 2 * 2
    out = v.copy()
    blocks = v[:r, :c].reshape(r // 2, 2, c // 2, 2, -1).mean(axis=(1, 3))
    out[:r, :c] = np.repeat(np.repeat(blocks, 2, axis=0), 2, axis=1)
    return out


def _scanner_scale(rng, clean):
    """Apply a random gain and offset after pinning the 99th percentile to a reference."""
    ref = np.percentile(clean, 99)
    ref = ref if ref > 0 else 1.0
    return (clean / ref * 1000.0 * rng.uniform(0.5, 2.0) + rng.uniform(0.0, 200.0)).astype(np.float32)


def generate_study(spec: PhantomSpec, study_index: int) -> Study:
    anat = phantom_anatomy(spec, study_index)
    rng = np.random.default_rng([spec.seed, 3, study_index])
    shape = anat.tissue.shape
    table = _contrast_table(rng)
    sigma = spec.noise_sigma
    tissue = anat.tissue

    def render(values, smooth=0.0):
        img = values[tissue]
        img = np.where(tissue == PARENCHYMA, img * anat.texture, img)
        if smooth:
            img = ndimage.gaussian_filter(img, sigma=(smooth, smooth, 0), mode="nearest")
        return img

    pid = patient_index(study_index)
    patient_id = f"PHANTOM-{spec.seed}-{pid:05d}"
    study_uid = generate_uid(_UID_PREFIX, [str(spec.seed), "study", str(study_index)])
    body_region = BODY_REGIONS[int(rng.choice(len(BODY_REGIONS), p=_REGION_WEIGHTS / _REGION_WEIGHTS.sum()))]

    images: list[tuple[SeriesLabel, float | None, np.ndarray]] = []
    for label in (SeriesLabel.T1W_PRE, SeriesLabel.T1W_ART, SeriesLabel.T1W_POR,
                  SeriesLabel.T1W_DEL, SeriesLabel.T2, SeriesLabel.T2FS):
        bias = _smooth_field(rng, shape, sigma=(12, 12, 4), amplitude=0.05)
        img = _rician(rng, render(table[label.token], smooth=0.6) * bias, sigma)
        images.append((label, None, img))

    adc = render(table["ADC"], smooth=1.0)
    s0 = render(table["S0"], smooth=0.6)
    for bucket in b_values_for(spec.num_dwi_bvalues):
        b = float(rng.choice(bucket))
        dwi = _low_resolution(s0 * np.exp(-b * adc * 1e-3))
        images.append((SeriesLabel.DWI, b, _rician(rng, dwi, 2 * sigma)))
    images.append((SeriesLabel.ADC, None, _rician(rng, _low_resolution(adc), sigma)))

    series = []
    for label, b, img in images:
        tag = label.token if b is None else f"{label.token}_b{int(b)}"
        series.append(SeriesVolume(
            voxels=_scanner_scale(rng, img),
            spacing=tuple(float(s) for s in spec.spacing),
            patient_id=patient_id,
            study_uid=study_uid,
            series_uid=generate_uid(_UID_PREFIX, [str(spec.seed), "series", str(study_index), tag]),
            b_value=b,
            label=label,
        ))
    series.sort(key=lambda v: v.series_uid)
    return Study(study_uid=study_uid, patient_id=patient_id, series=tuple(series), body_region=body_region)


def generate_studies(spec: PhantomSpec) -> list[Study]:
    return [generate_study(spec, i) for i in range(spec.num_studies)]


def series_dirname(volume: SeriesVolume) -> str:
    name = f"SERIES_{volume.label.token}"
    if volume.b_value is not None:
        name += f"_b{int(round(volume.b_value)):03d}"
    return name


def _quantize(voxels: np.ndarray) -> tuple[np.ndarray, float, float]:
    """uint16 encoding with a per-series rescale slope and intercept."""
    lo, hi = float(voxels.min()), float(voxels.max())
    intercept = float(f"{min(lo, 0.0):.10g}")
    slope = float(f"{max(hi - intercept, 1e-6) / 65000.0:.10g}")
    stored = np.clip(np.rint((voxels.astype(np.float64) - intercept) / slope), 0, 65535).astype(np.uint16)
    return stored, slope, intercept


def _slice_dataset(vol: SeriesVolume, k: int, stored: np.ndarray, slope: float, intercept: float,
                   series_number: int, body_region: str | None, sop_uid: str) -> FileDataset:
    meta = FileMetaDataset()
    meta.MediaStorageSOPClassUID = MRImageStorage
    meta.MediaStorageSOPInstanceUID = sop_uid
    meta.TransferSyntaxUID = ExplicitVRLittleEndian
    ds = FileDataset(None, {}, file_meta=meta, preamble=b"\0" * 128)
    ds.SOPClassUID = MRImageStorage
    ds.SOPInstanceUID = sop_uid
    ds.Modality = "MR"
    ds.Manufacturer = "PHANTOM"
    ds.PatientID = vol.patient_id
    ds.PatientName = vol.patient_id
    ds.StudyInstanceUID = vol.study_uid
    ds.SeriesInstanceUID = vol.series_uid
    ds.SeriesNumber = series_number
    # deliberately uninformative: labels come from the sidecar manifest
    ds.SeriesDescription = f"SERIES {series_number}"
    if body_region:
        ds.BodyPartExamined = body_region.upper().replace("+", "_")
    ds.InstanceNumber = k + 1
    ds.ImageOrientationPatient = [1, 0, 0, 0, 1, 0]
    ds.ImagePositionPatient = [0.0, 0.0, round(k * vol.spacing[2], 6)]
    ds.PixelSpacing = [vol.spacing[0], vol.spacing[1]]
    ds.SliceThickness = vol.spacing[2]
    ds.SpacingBetweenSlices = vol.spacing[2]
    if vol.b_value is not None:
        ds.DiffusionBValue = float(vol.b_value)
    ds.Rows, ds.Columns = stored.shape[0], stored.shape[1]
    ds.SamplesPerPixel = 1
    ds.PhotometricInterpretation = "MONOCHROME2"
    ds.BitsAllocated = 16
    ds.BitsStored = 16
    ds.HighBit = 15
    ds.PixelRepresentation = 0
    ds.RescaleSlope = f"{slope:.10g}"
    ds.RescaleIntercept = f"{intercept:.10g}"
    ds.PixelData = np.ascontiguousarray(stored[:, :, k], dtype="<u2").tobytes()
    return ds


def write_dicom_tree(studies, out_path: str | os.PathLike, seed: int | None = None) -> Path:
    """Write studies as ``out/STUDY_xxxx/SERIES_<label>[_b###]/IMG_####.dcm`` plus ``labels.tsv``.

    The tree is built in a sibling temporary directory and moved into place, so a
    failure never leaves a partial tree at ``out_path``.
    """
    out = Path(out_path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise FileExistsError(f"output path {out} exists and is not an empty directory")
    parent = out.parent
    try:
        parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=parent))
    except OSError as e:
        raise OSError(f"cannot create phantom tree under {parent}: {e}") from e
    try:
        labels = {}
        for i, study in enumerate(studies):
            study_dir = tmp / f"STUDY_{i:04d}"
            for n, vol in enumerate(sorted(study.series, key=lambda v: (v.label, v.b_value or 0)), 1):
                series_dir = study_dir / series_dirname(vol)
                series_dir.mkdir(parents=True)
                stored, slope, intercept = _quantize(vol.voxels)
                for k in range(stored.shape[2]):
                    sop = generate_uid(_UID_PREFIX, [vol.series_uid, str(k)])
                    ds = _slice_dataset(vol, k, stored, slope, intercept, n, study.body_region, sop)
                    ds.save_as(series_dir / f"IMG_{k + 1:04d}.dcm", enforce_file_format=True)
                labels[vol.series_uid] = vol.label
        write_labels_manifest(labels, tmp / LABELS_MANIFEST,
                              comment=f"phantom seed={seed}" if seed is not None else None)
        if out.exists():
            out.rmdir()
        os.replace(tmp, out)
    except BaseException as e:
        shutil.rmtree(tmp, ignore_errors=True)
        if isinstance(e, OSError):
            raise OSError(f"failed writing phantom tree to {out}: {e}") from e
        raise
    logger.info("wrote %d studies to %s", len(studies), out)
    return out


def quantization_step(voxels: np.ndarray) -> float:
    return _quantize(voxels)[1]
