"""Synthetic photon-sparse 4D movies of penetrating vessels with known truth.

Coordinates are physical. Depth runs along z from the top slice; lateral
positions (y, x) are measured from the centre of the field of view. A
magnification ``m`` shrinks the lateral voxel pitch to ``voxel_size / m``,
so the same vessel covers ``m`` times more voxels across.

Each vessel's radius at slice z and time t is::

    r(z, t) = r0(z) * (1 + sum_e sign_e * A_e * bump(t - onset_e - d_e(z) / v_e))

with ``bump`` a raised cosine of width ``bump_width_s`` and ``d_e(z)`` the
distance from the end of the vessel the event starts at. Intensity is a
sigmoid of (radius - distance to the centreline) with a one-voxel wall
width, and photon counts are Poisson with mean
``intensity * photon_rate_scale * exp(-depth / attenuation_length)``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy.special import expit

from .volume import Movie4D, VesselROI


@dataclass
class EventSpec:
    kind: str = "dilation"
    onset_s: float = 1.0
    amplitude: float = 0.2
    speed_um_s: float = 50.0
    direction: str = "upward"

    def __post_init__(self):
        if self.kind not in ("dilation", "constriction"):
            raise ValueError(f"event kind must be dilation or constriction, got {self.kind!r}")
        if self.direction not in ("upward", "downward"):
            raise ValueError(f"event direction must be upward or downward, got {self.direction!r}")
        if not 0 < self.amplitude < 1:
            raise ValueError("event amplitude must lie in (0, 1)")
        if not self.speed_um_s > 0:
            raise ValueError("event speed must be positive")

    @property
    def sign(self):
        return 1.0 if self.kind == "dilation" else -1.0


@dataclass
class VesselSpec:
    """``centerline`` is a polyline of (depth, y, x) points in µm; ``radius_um`` is
    a scalar or a (top, bottom) pair interpolated linearly over depth."""
    centerline: List[List[float]] = field(default_factory=lambda: [[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]])
    radius_um: object = 4.0
    events: List[EventSpec] = field(default_factory=list)

    def __post_init__(self):
        self.centerline = [list(map(float, p)) for p in self.centerline]
        if len(self.centerline) < 2:
            raise ValueError("a centerline needs at least two points")
        self.events = [e if isinstance(e, EventSpec) else EventSpec(**e) for e in self.events]
        r = self.radius_um
        radii = [r] if np.isscalar(r) else list(r)
        if len(radii) not in (1, 2) or min(radii) <= 0:
            raise ValueError("radius must be positive: a scalar or a (top, bottom) pair")

    @property
    def depth_range(self):
        d = [p[0] for p in self.centerline]
        return min(d), max(d)

    def base_radius(self, depth):
        if np.isscalar(self.radius_um):
            return np.full(np.shape(depth), float(self.radius_um))
        top, bottom = map(float, self.radius_um)
        d0, d1 = self.depth_range
        frac = np.clip((np.asarray(depth, dtype=float) - d0) / max(d1 - d0, 1e-12), 0, 1)
        return top + (bottom - top) * frac

    @property
    def max_radius(self):
        return float(np.max(np.atleast_1d(self.radius_um)))


@dataclass
class PhantomSpec:
    dims: List[int] = field(default_factory=lambda: [100, 16, 32, 32])  # T, Z, Y, X
    frame_rate: float = 20.0
    voxel_size: List[float] = field(default_factory=lambda: [6.25, 1.0, 1.0])
    origin_depth: float = 0.0
    vessels: List[VesselSpec] = field(default_factory=lambda: [VesselSpec()])
    photon_rate_scale: Optional[float] = None
    depth_attenuation_length: Optional[float] = None
    background: float = 0.0
    magnification: float = 1.0
    bump_width_s: float = 2.0
    onset_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.dims = [int(d) for d in self.dims]
        if len(self.dims) != 4 or min(self.dims) < 1:
            raise ValueError(f"dims must be four positive ints (T, Z, Y, X), got {self.dims}")
        self.voxel_size = [float(v) for v in self.voxel_size]
        self.vessels = [v if isinstance(v, VesselSpec) else VesselSpec(**v) for v in self.vessels]
        if not self.frame_rate > 0:
            raise ValueError("frame_rate must be positive")
        if self.photon_rate_scale is not None and not self.photon_rate_scale > 0:
            raise ValueError("photon_rate_scale must be positive (or null for the noiseless limit)")
        if self.depth_attenuation_length is not None and not self.depth_attenuation_length > 0:
            raise ValueError("depth_attenuation_length must be positive")
        if not 0 <= self.background < 1:
            raise ValueError("background must lie in [0, 1)")
        if not self.magnification > 0:
            raise ValueError("magnification must be positive")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown phantom spec keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return asdict(self)

    @property
    def noiseless(self):
        return self.photon_rate_scale is None or math.isinf(self.photon_rate_scale)

    def lateral_pitch(self):
        return self.voxel_size[1] / self.magnification, self.voxel_size[2] / self.magnification

    def slice_depths(self):
        """Depth of each slice relative to ``origin_depth``."""
        return self.voxel_size[0] * np.arange(self.dims[1])

    def times(self):
        return np.arange(self.dims[0]) / self.frame_rate


@dataclass
class PhantomTruth:
    mask: Movie4D
    radius: np.ndarray  # (n_vessels, Z, T) µm
    onsets: List[dict]
    expected: Movie4D  # noise-free expected photon counts (or intensity when noiseless)


def _event_delay(event, vessel, depths):
    d0, d1 = vessel.depth_range
    dist = (d1 - depths) if event.direction == "upward" else (depths - d0)
    return np.clip(dist, 0.0, None) / event.speed_um_s


def _bump(tau, width):
    inside = (tau >= 0) & (tau <= width)
    return np.where(inside, 0.5 * (1 - np.cos(2 * np.pi * np.clip(tau, 0, width) / width)), 0.0)


def radius_table(spec: PhantomSpec, vessel: VesselSpec):
    """True radius (µm) per (z, t)."""
    depths = spec.slice_depths()
    t = spec.times()
    r0 = vessel.base_radius(depths)
    mod = np.ones((depths.size, t.size))
    for ev in vessel.events:
        delay = _event_delay(ev, vessel, depths)
        mod += ev.sign * ev.amplitude * _bump(t[None, :] - ev.onset_s - delay[:, None], spec.bump_width_s)
    return r0[:, None] * mod


def _distance_to_polyline(points, centerline):
    """Euclidean distance from ``points`` (..., 3) to a polyline, all in µm."""
    best = np.full(points.shape[:-1], np.inf)
    cl = np.asarray(centerline, dtype=float)
    for a, b in zip(cl[:-1], cl[1:]):
        ab = b - a
        denom = float(ab @ ab)
        rel = points - a
        u = np.clip((rel @ ab) / denom, 0, 1) if denom > 0 else np.zeros(points.shape[:-1])
        d = np.linalg.norm(rel - u[..., None] * ab, axis=-1)
        best = np.minimum(best, d)
    return best


def _grid_points(spec):
    _, Z, Y, X = spec.dims
    py, px = spec.lateral_pitch()
    depth = spec.slice_depths()
    y = (np.arange(Y) - (Y - 1) / 2) * py
    x = (np.arange(X) - (X - 1) / 2) * px
    return np.stack(np.meshgrid(depth, y, x, indexing="ij"), axis=-1)


def _check_bounds(spec):
    _, Z, Y, X = spec.dims
    py, px = spec.lateral_pitch()
    half_y, half_x = (Y - 1) / 2 * py, (X - 1) / 2 * px
    for k, v in enumerate(spec.vessels):
        growth = 1 + sum(e.amplitude for e in v.events if e.kind == "dilation")
        r = v.max_radius * growth + py
        for d, y, x in v.centerline:
            if abs(y) + r > half_y or abs(x) + r > half_x:
                raise ValueError(f"vessel {k} exceeds the lateral field of view "
                                 f"({2 * half_y:.1f} x {2 * half_x:.1f} µm at magnification {spec.magnification})")


def true_onsets(spec: PhantomSpec):
    """Per event and slice: bump start and the time the radius change reaches ``onset_fraction``."""
    frac_delay = spec.bump_width_s * math.acos(1 - 2 * spec.onset_fraction) / (2 * math.pi)
    depths = spec.slice_depths()
    rows = []
    event_id = 0
    for vid, v in enumerate(spec.vessels):
        d0, d1 = v.depth_range
        for ev in v.events:
            delay = _event_delay(ev, v, depths)
            for z, depth in enumerate(depths):
                if not d0 <= depth <= d1:
                    continue
                start = ev.onset_s + delay[z]
                rows.append({"event_id": event_id, "vessel_id": vid, "kind": ev.kind, "z": z,
                             "z_um": float(spec.origin_depth + depth), "start_s": float(start),
                             "onset_s": float(start + frac_delay)})
            event_id += 1
    return rows


def generate(spec: PhantomSpec):
    """Render the movie and its truth. Returns ``(noisy Movie4D, PhantomTruth)``."""
    _check_bounds(spec)
    T, Z, Y, X = spec.dims
    pts = _grid_points(spec)
    wall = spec.lateral_pitch()[0]
    intensity = np.zeros((T, Z, Y, X))
    mask = np.zeros((T, Z, Y, X), dtype=bool)
    radii = []
    for v in spec.vessels:
        dist = _distance_to_polyline(pts, v.centerline)  # (Z, Y, X)
        r = radius_table(spec, v)  # (Z, T)
        radii.append(r)
        rt = r.T[:, :, None, None]
        intensity = np.maximum(intensity, expit((rt - dist[None]) / wall))
        mask |= dist[None] <= rt
    level = spec.background + (1 - spec.background) * intensity
    depth_abs = spec.origin_depth + spec.slice_depths()
    if spec.depth_attenuation_length:
        level = level * np.exp(-depth_abs / spec.depth_attenuation_length)[None, :, None, None]
    meta = dict(frame_rate=spec.frame_rate,
                voxel_size=(spec.voxel_size[0], *spec.lateral_pitch()),
                origin_depth=spec.origin_depth)
    if spec.noiseless:
        noisy = level.astype(np.float32)
        expected = noisy
    else:
        expected = (level * spec.photon_rate_scale).astype(np.float32)
        noisy = np.empty_like(expected)
        for t, child in enumerate(np.random.SeedSequence(spec.seed).spawn(T)):
            noisy[t] = np.random.default_rng(child).poisson(expected[t])
    truth = PhantomTruth(mask=Movie4D(mask.astype(np.float32), **meta),
                         radius=np.stack(radii) if radii else np.zeros((0, Z, T)),
                         onsets=true_onsets(spec),
                         expected=Movie4D(expected, **meta))
    return Movie4D(noisy, **meta), truth


def phantom_rois(spec: PhantomSpec, margin_voxels=2) -> List[VesselROI]:
    """Per-slice bounding rectangles around each vessel at its widest."""
    _, Z, Y, X = spec.dims
    py, px = spec.lateral_pitch()
    depths = spec.slice_depths()
    rois = []
    for vid, v in enumerate(spec.vessels):
        growth = 1 + sum(e.amplitude for e in v.events if e.kind == "dilation")
        r = v.max_radius * growth
        cl = np.asarray(v.centerline)
        d0, d1 = v.depth_range
        slices = {}
        for z, depth in enumerate(depths):
            if not d0 <= depth <= d1:
                continue
            cy = np.interp(depth, cl[:, 0], cl[:, 1])
            cx = np.interp(depth, cl[:, 0], cl[:, 2])
            yc, xc = cy / py + (Y - 1) / 2, cx / px + (X - 1) / 2
            ry, rx = r / py + margin_voxels, r / px + margin_voxels
            y0, y1 = max(0, int(np.floor(yc - ry))), min(Y, int(np.ceil(yc + ry)) + 1)
            x0, x1 = max(0, int(np.floor(xc - rx))), min(X, int(np.ceil(xc + rx)) + 1)
            slices[z] = (y0, y1, x0, x1)
        rois.append(VesselROI(vid, slices))
    return rois


def dice(a, b):
    """``2|a & b| / (|a| + |b|)``; 1 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"dice: shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def write_truth_csv(truth: PhantomTruth, spec: PhantomSpec, path):
    depths = spec.origin_depth + spec.slice_depths()
    times = spec.times()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vessel_id", "z", "z_um", "t_seconds", "radius_um"])
        for vid, table in enumerate(truth.radius):
            for z in range(table.shape[0]):
                for t in range(table.shape[1]):
                    w.writerow([vid, z, f"{depths[z]:.6g}", f"{times[t]:.6g}", f"{table[z, t]:.6g}"])


def write_onset_truth_csv(truth: PhantomTruth, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["event_id", "kind", "z_um", "onset_s", "start_s"])
        for row in truth.onsets:
            w.writerow([row["event_id"], row["kind"], f"{row['z_um']:.6g}",
                        f"{row['onset_s']:.6g}", f"{row['start_s']:.6g}"])
