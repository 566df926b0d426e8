"""Volume -> fixed-size normalized model input, plus the training-time augmentation."""
from __future__ import annotations

import dataclasses
import math
import os
import struct
from typing import Sequence

import numpy as np

from mpmri_series.ingest import SeriesVolume

TARGET_SPACING = (1.5, 1.5, 7.8)
TARGET_SHAPE = (256, 256, 36)


@dataclasses.dataclass(frozen=True)
class PreprocessConfig:
    target_spacing: tuple[float, float, float] = TARGET_SPACING
    target_shape: tuple[int, int, int] = TARGET_SHAPE
    p_low: float = 1.0
    p_high: float = 99.0
    rotate_prob: float = 0.5

    def __post_init__(self):
        if len(self.target_spacing) != 3 or any(s <= 0 for s in self.target_spacing):
            raise ValueError(f"target_spacing must be 3 positive values, got {self.target_spacing}")
        if len(self.target_shape) != 3 or any(int(s) <= 0 for s in self.target_shape):
            raise ValueError(f"target_shape must be 3 positive ints, got {self.target_shape}")
        if not 0 <= self.p_low < self.p_high <= 100:
            raise ValueError(f"need 0 <= p_low < p_high <= 100, got {self.p_low}, {self.p_high}")
        if not 0 <= self.rotate_prob <= 1:
            raise ValueError(f"rotate_prob must be in [0, 1], got {self.rotate_prob}")


@dataclasses.dataclass(frozen=True)
class ModelInput:
    voxels: np.ndarray
    series_uid: str = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.voxels.shape)


def _voxels(x) -> np.ndarray:
    return x.voxels if hasattr(x, "voxels") else np.asarray(x)


def output_shape(shape: Sequence[int], spacing: Sequence[float],
                 target_spacing: Sequence[float]) -> tuple[int, ...]:
    return tuple(max(1, int(math.floor(d * s / t + 0.5))) for d, s, t in zip(shape, spacing, target_spacing))


def _resample_axis(v: np.ndarray, axis: int, n_out: int, step: float) -> np.ndarray:
    """Linear interpolation along one axis at input coordinates j*step, clamped to the edges."""
    n_in = v.shape[axis]
    x = np.clip(np.arange(n_out, dtype=np.float64) * step, 0.0, n_in - 1)
    i0 = np.floor(x).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    shape = [1] * v.ndim
    shape[axis] = n_out
    f = (x - i0).reshape(shape)
    v0 = np.take(v, i0, axis=axis)
    v1 = np.take(v, i1, axis=axis)
    # v0 + f*(v1 - v0) keeps constant runs exact
    return v0 + f * (v1 - v0)


def resample(volume: SeriesVolume, target_spacing: Sequence[float] = TARGET_SPACING) -> SeriesVolume:
    """Trilinear resampling to ``target_spacing``; the first voxel centre stays fixed.

    Trilinear interpolation is separable, so it is applied one axis at a time.
    """
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or any(t <= 0 for t in target):
        raise ValueError(f"target spacing must be 3 positive values, got {target_spacing}")
    if any(s <= 0 for s in volume.spacing):
        raise ValueError(f"volume {volume.series_uid} has non-positive spacing {volume.spacing}")
    v = volume.voxels
    out_dtype = v.dtype if np.issubdtype(v.dtype, np.floating) else np.float32
    new_shape = output_shape(v.shape, volume.spacing, target)
    out = v
    # shrinking axes first keeps the intermediate arrays small
    for axis in sorted(range(3), key=lambda a: new_shape[a] / v.shape[a]):
        if volume.spacing[axis] == target[axis]:
            continue
        if out is v:
            out = v.astype(np.float64)
        out = _resample_axis(out, axis, new_shape[axis], target[axis] / volume.spacing[axis])
    out = out.astype(out_dtype, copy=out is v)
    return dataclasses.replace(volume, voxels=out, spacing=target)


def percentile_normalize(volume: SeriesVolume, p_low: float = 1.0, p_high: float = 99.0) -> SeriesVolume:
    """Clip to the [p_low, p_high] percentiles and map that window affinely onto [0, 1]."""
    if not p_low < p_high:
        raise ValueError(f"p_low must be below p_high, got {p_low}, {p_high}")
    v = np.asarray(volume.voxels, dtype=np.float64)
    if v.size == 0:
        raise ValueError(f"volume {volume.series_uid} is empty")
    a, b = np.percentile(v, [p_low, p_high])
    if b - a < 1e-12:
        out = np.zeros(v.shape, dtype=np.float32)
    else:
        out = np.clip(v, a, b)
        out -= a
        out /= b - a
        out = out.astype(np.float32)
    return dataclasses.replace(volume, voxels=out)


def crop_or_pad(volume, target_shape: Sequence[int] = TARGET_SHAPE) -> ModelInput:
    v = _voxels(volume)
    if v.size == 0:
        raise ValueError("cannot crop or pad an empty volume")
    src, dst = [], []
    for d, t in zip(v.shape, target_shape):
        if d >= t:
            start = (d - t) // 2
            src.append(slice(start, start + t))
            dst.append(slice(0, t))
        else:
            before = (t - d) // 2
            src.append(slice(0, d))
            dst.append(slice(before, before + d))
    out = np.zeros(tuple(int(t) for t in target_shape), dtype=np.float32)
    out[tuple(dst)] = v[tuple(src)]
    return ModelInput(voxels=out, series_uid=getattr(volume, "series_uid", ""))


def augment_rot90(inp: ModelInput, rng: np.random.Generator, prob: float = 0.5) -> ModelInput:
    """With probability ``prob`` rotate in-plane by k*90 degrees, k uniform in {1, 2, 3}."""
    v = inp.voxels
    if v.shape[0] != v.shape[1]:
        raise ValueError(f"in-plane rotation needs square slices, got {v.shape[:2]} "
                         f"for {inp.series_uid}")
    # both draws are always taken so the stream advances identically on either branch
    u = rng.random()
    k = int(rng.integers(1, 4))
    if u >= prob:
        return inp
    return ModelInput(voxels=np.ascontiguousarray(np.rot90(v, k, axes=(0, 1))), series_uid=inp.series_uid)


def preprocess_chain(volume: SeriesVolume, train_mode: bool = False,
                     rng: np.random.Generator | None = None,
                     config: PreprocessConfig | None = None) -> ModelInput:
    config = config or PreprocessConfig()
    out = prepare(volume, config)
    if train_mode:
        if rng is None:
            raise ValueError("train_mode preprocessing needs an explicit rng")
        out = augment_rot90(out, rng, config.rotate_prob)
    return out


def prepare(volume: SeriesVolume, config: PreprocessConfig | None = None) -> ModelInput:
    """The deterministic part of the chain: resample, normalize, crop/pad."""
    config = config or PreprocessConfig()
    v = resample(volume, config.target_spacing)
    v = percentile_normalize(v, config.p_low, config.p_high)
    return crop_or_pad(v, config.target_shape)


# Portable volume archive: little-endian header (3 x uint32 dims, 3 x float64 spacings,
# 1-byte scalar type tag) followed by raw little-endian voxels in C order.
_HEADER = struct.Struct("<3I3dc")
_TYPE_TAGS = {b"f": np.dtype("<f4"), b"d": np.dtype("<f8"), b"H": np.dtype("<u2"), b"h": np.dtype("<i2")}
_TAG_OF = {v: k for k, v in _TYPE_TAGS.items()}


def write_volume_archive(path: str | os.PathLike, voxels: np.ndarray,
                         spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> None:
    v = np.asarray(voxels)
    if v.ndim != 3:
        raise ValueError(f"archive holds 3D volumes, got {v.ndim}D")
    dt = v.dtype.newbyteorder("<")
    if dt not in _TAG_OF:
        raise ValueError(f"unsupported voxel type {v.dtype}")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(*v.shape, *map(float, spacing), _TAG_OF[dt]))
        f.write(np.ascontiguousarray(v, dtype=dt).tobytes())


def read_volume_archive(path: str | os.PathLike) -> tuple[np.ndarray, tuple[float, float, float]]:
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ValueError(f"{path}: truncated archive header")
        *rest, tag = _HEADER.unpack(header)
        dims, spacing = tuple(rest[:3]), tuple(rest[3:])
        if tag not in _TYPE_TAGS:
            raise ValueError(f"{path}: unknown scalar type tag {tag!r}")
        dt = _TYPE_TAGS[tag]
        data = f.read()
    n = int(np.prod(dims))
    if len(data) != n * dt.itemsize:
        raise ValueError(f"{path}: expected {n * dt.itemsize} voxel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=dt).reshape(dims).copy(), spacing
