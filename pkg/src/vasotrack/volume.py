"""Volumes, movies, the V4D container, and movie pre/post-processing.

V4D layout (all little-endian)::

    0   4s   magic "V4DM"
    4   u8   version (1)
    5   u8   dtype (1 = float32)
    6   2x   reserved, zero
    8   4*u32  T, Z, Y, X
    24  T*Z*Y*X float32, X fastest
    [optional trailer]  "META", u32 length, UTF-8 JSON
                        {"frame_rate", "voxel_size", "origin_depth"}

A file without the trailer loads with ``frame_rate = 1.0``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

MAGIC = b"V4DM"
VERSION = 1
DTYPE_F32 = 1
HEADER = struct.Struct("<4sBBxx4I")
TRAILER_MAGIC = b"META"


class V4DError(ValueError):
    """Malformed or unsupported V4D container."""

    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class DegenerateInputError(ValueError):
    pass


@dataclass
class Volume3D:
    data: np.ndarray
    voxel_size: Optional[Tuple[float, float, float]] = None
    origin_depth: Optional[float] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be 3D with positive dims, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")
        if self.voxel_size is not None:
            self.voxel_size = tuple(float(v) for v in self.voxel_size)

    @property
    def dims(self):
        return self.data.shape


@dataclass
class Movie4D:
    """Time-ordered frames stored as one ``(T, Z, Y, X)`` float32 array."""
    data: np.ndarray
    frame_rate: float = 1.0
    voxel_size: Optional[Tuple[float, float, float]] = None
    origin_depth: Optional[float] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ValueError(f"movie must be 4D (T, Z, Y, X), got shape {self.data.shape}")
        if not self.frame_rate > 0:
            raise ValueError(f"frame_rate must be > 0, got {self.frame_rate}")
        if self.voxel_size is not None:
            self.voxel_size = tuple(float(v) for v in self.voxel_size)

    @classmethod
    def from_frames(cls, frames: Sequence[Volume3D], frame_rate):
        if not frames:
            raise ValueError("movie needs at least one frame")
        dims = {f.dims for f in frames}
        meta = {(f.voxel_size, f.origin_depth) for f in frames}
        if len(dims) != 1 or len(meta) != 1:
            raise ValueError("all frames must share dims and metadata")
        f0 = frames[0]
        return cls(np.stack([f.data for f in frames]), frame_rate, f0.voxel_size, f0.origin_depth)

    @property
    def n_frames(self):
        return self.data.shape[0]

    @property
    def dims(self):
        return self.data.shape[1:]

    def frame(self, t) -> Volume3D:
        return Volume3D(self.data[t], self.voxel_size, self.origin_depth)

    @property
    def frames(self) -> List[Volume3D]:
        return [self.frame(t) for t in range(self.n_frames)]

    def with_data(self, data, frame_rate=None):
        return replace(self, data=data, frame_rate=self.frame_rate if frame_rate is None else frame_rate)

    def depths(self):
        """Depth of each z slice below the surface in µm (index units without metadata)."""
        dz = self.voxel_size[0] if self.voxel_size else 1.0
        return (self.origin_depth or 0.0) + dz * np.arange(self.dims[0])


@dataclass
class VesselROI:
    """Per-slice rectangles ``[y0, y1) x [x0, x1)`` annotating one vessel."""
    vessel_id: int
    slices: dict = field(default_factory=dict)  # z -> (y0, y1, x0, x1)

    def __post_init__(self):
        for z, (y0, y1, x0, x1) in self.slices.items():
            if not (y0 < y1 and x0 < x1):
                raise ValueError(f"vessel {self.vessel_id} slice {z}: empty rectangle")
            if min(z, y0, x0) < 0:
                raise ValueError(f"vessel {self.vessel_id} slice {z}: negative coordinate")

    @property
    def z_indices(self):
        return sorted(self.slices)

    def check_bounds(self, dims):
        Z, Y, X = dims
        for z, (y0, y1, x0, x1) in self.slices.items():
            if z >= Z or y1 > Y or x1 > X:
                raise ValueError(f"vessel {self.vessel_id} slice {z}: rectangle outside volume {dims}")

    def rect(self, z):
        try:
            return self.slices[z]
        except KeyError:
            raise KeyError(f"vessel {self.vessel_id} has no rectangle at z={z}") from None


@dataclass
class NormalizationRecord:
    mean: float
    std: float
    post_stretch_min: float
    post_stretch_max: float
    degenerate: bool = False


# -- V4D I/O -------------------------------------------------------------------

def save_v4d(movie: Movie4D, path):
    data = np.asarray(movie.data)
    if data.ndim != 4 or data.shape[0] == 0:
        raise ValueError("cannot save a movie with zero frames")
    if not np.all(np.isfinite(data)):
        raise ValueError("cannot save non-finite values")
    meta = {"frame_rate": float(movie.frame_rate),
            "voxel_size": list(movie.voxel_size) if movie.voxel_size else None,
            "origin_depth": movie.origin_depth}
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, DTYPE_F32, *data.shape))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
        fh.write(TRAILER_MAGIC + struct.pack("<I", len(blob)) + blob)


def load_v4d(path) -> Movie4D:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise V4DError("header", f"file is {len(raw)} bytes, shorter than the {HEADER.size}-byte header")
    magic, version, dtype, T, Z, Y, X = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise V4DError("magic", f"expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise V4DError("version", f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise V4DError("dtype", f"unsupported dtype code {dtype}")
    if raw[6:8] != b"\0\0":
        raise V4DError("reserved", "reserved bytes must be zero")
    if min(T, Z, Y, X) == 0:
        raise V4DError("dims", f"zero-sized dims T={T} Z={Z} Y={Y} X={X}")
    n = T * Z * Y * X
    end = HEADER.size + 4 * n
    if len(raw) < end:
        raise V4DError("payload", f"truncated: expected {4 * n} bytes, found {len(raw) - HEADER.size}")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=HEADER.size).reshape(T, Z, Y, X)
    meta = {}
    rest = raw[end:]
    if rest:
        if rest[:4] != TRAILER_MAGIC or len(rest) < 8:
            raise V4DError("trailer", "unrecognized bytes after payload")
        (length,) = struct.unpack_from("<I", rest, 4)
        if len(rest) != 8 + length:
            raise V4DError("trailer", "metadata length does not match file size")
        meta = json.loads(rest[8:].decode())
    vs = meta.get("voxel_size")
    return Movie4D(data.astype(np.float32), float(meta.get("frame_rate") or 1.0),
                   tuple(vs) if vs else None, meta.get("origin_depth"))


# -- ROI annotation files ------------------------------------------------------

def load_rois(path) -> List[VesselROI]:
    doc = json.loads(Path(path).read_text())
    rois = []
    for v in doc["vessels"]:
        slices = {}
        for s in v["slices"]:
            z = int(s["z"])
            if z in slices:
                raise ValueError(f"vessel {v['id']}: more than one rectangle at z={z}")
            slices[z] = (int(s["y0"]), int(s["y1"]), int(s["x0"]), int(s["x1"]))
        rois.append(VesselROI(int(v["id"]), slices))
    return rois


def save_rois(rois, path):
    doc = {"vessels": [
        {"id": r.vessel_id,
         "slices": [dict(zip(("z", "y0", "y1", "x0", "x1"), (z, *r.slices[z]))) for z in r.z_indices]}
        for r in rois]}
    Path(path).write_text(json.dumps(doc, indent=1))


# -- processing ----------------------------------------------------------------

def normalize(movie: Movie4D):
    """Joint z-score over all voxels and frames, then a min-max stretch to [0, 1]."""
    x = movie.data.astype(np.float64)
    mean, std = float(x.mean()), float(x.std())
    if not std > 0:
        raise DegenerateInputError("cannot normalize a constant movie (std = 0)")
    z = (x - mean) / std
    lo, hi = float(z.min()), float(z.max())
    out = (z - lo) / (hi - lo)
    return movie.with_data(out.astype(np.float32)), NormalizationRecord(mean, std, lo, hi)


def time_collapse(movie: Movie4D) -> Volume3D:
    return Volume3D(movie.data.mean(axis=0, dtype=np.float64), movie.voxel_size, movie.origin_depth)


def temporal_bin(movie: Movie4D, factor: int) -> Movie4D:
    """Average consecutive groups of ``factor`` frames; a trailing partial group is dropped."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"binning factor must be a positive integer, got {factor}")
    factor = int(factor)
    T = movie.n_frames // factor
    if T == 0:
        raise ValueError(f"binning factor {factor} exceeds frame count {movie.n_frames}")
    grouped = movie.data[:T * factor].reshape(T, factor, *movie.dims)
    return movie.with_data(grouped.mean(axis=1, dtype=np.float64).astype(np.float32),
                           movie.frame_rate / factor)


def temporal_decimate(movie: Movie4D, factor: int) -> Movie4D:
    """Keep every ``factor``-th frame."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"decimation factor must be a positive integer, got {factor}")
    factor = int(factor)
    T = movie.n_frames // factor
    return movie.with_data(movie.data[:T * factor:factor].copy(), movie.frame_rate / factor)


def downsample_to_rate(movie: Movie4D, target_hz: float, mode="average") -> Movie4D:
    """Integer-factor temporal reduction with ``factor = floor(rate / target)``."""
    if target_hz <= 0:
        raise ValueError("target rate must be positive")
    if target_hz > movie.frame_rate:
        raise ValueError(f"target {target_hz} Hz exceeds source rate {movie.frame_rate} Hz")
    factor = int(np.floor(movie.frame_rate / target_hz + 1e-9))
    if mode == "average":
        return temporal_bin(movie, factor)
    if mode == "decimate":
        return temporal_decimate(movie, factor)
    raise ValueError(f"unknown downsampling mode {mode!r}")


def z_window(Z):
    return max(1, int(round(Z / 10)))


def z_moving_average(movie: Movie4D, width=None) -> Movie4D:
    """Sliding mean along z of width ``round(Z/10)`` (min 1), truncated at the ends.

    Even widths cover ``width // 2`` slices before and ``width - 1 - width // 2``
    after the centre slice.
    """
    Z = movie.dims[0]
    w = z_window(Z) if width is None else int(width)
    before, after = w // 2, w - 1 - w // 2
    x = movie.data.astype(np.float64)
    csum = np.concatenate([np.zeros_like(x[:, :1]), np.cumsum(x, axis=1)], axis=1)
    lo = np.clip(np.arange(Z) - before, 0, Z)
    hi = np.clip(np.arange(Z) + after + 1, 0, Z)
    out = (csum[:, hi] - csum[:, lo]) / (hi - lo)[None, :, None, None]
    return movie.with_data(out.astype(np.float32))


def roi_extract(volume, roi: VesselROI, z) -> float:
    data = volume.data if hasattr(volume, "data") else np.asarray(volume)
    y0, y1, x0, x1 = roi.rect(z)
    return float(data[z, y0:y1, x0:x1].sum(dtype=np.float64))
