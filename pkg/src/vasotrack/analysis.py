"""Per-depth vessel traces and what is measured on them.

Traces are sums over a vessel's annotated rectangle at every slice and
frame. On top of those: Pearson correlation between slices, zero-phase
low-pass filtering, onset detection with depth ordering, and equivalent
diameters for the magnification check.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage, signal, stats

from .volume import Movie4D, VesselROI


@dataclass
class TraceMatrix:
    values: np.ndarray  # (rows, T)
    z_indices: List[int]
    z_depths: np.ndarray  # µm
    frame_rate: float
    vessel_id: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.z_depths = np.asarray(self.z_depths, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.z_indices):
            raise ValueError("trace rows must match the annotated slices")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("traces must be finite")

    @property
    def n_frames(self):
        return self.values.shape[1]

    def times(self):
        return np.arange(self.n_frames) / self.frame_rate

    def with_values(self, values):
        return TraceMatrix(values, list(self.z_indices), self.z_depths.copy(), self.frame_rate,
                           self.vessel_id)


def vessel_trace(seg_movie: Movie4D, roi: VesselROI, intensity_movie: Optional[Movie4D] = None):
    """Per-slice ROI sums of the segmentation, or of intensity x segmentation."""
    roi.check_bounds(seg_movie.dims)
    data = seg_movie.data.astype(np.float64)
    if intensity_movie is not None:
        if intensity_movie.data.shape != seg_movie.data.shape:
            raise ValueError(f"intensity movie {intensity_movie.data.shape} and segmentation "
                             f"{seg_movie.data.shape} are not co-registered")
        data = data * intensity_movie.data
    zs = roi.z_indices
    rows = []
    for z in zs:
        y0, y1, x0, x1 = roi.rect(z)
        rows.append(data[:, z, y0:y1, x0:x1].sum(axis=(1, 2)))
    depths = seg_movie.depths()[zs]
    return TraceMatrix(np.array(rows).reshape(len(zs), seg_movie.n_frames), list(zs), depths,
                       seg_movie.frame_rate, roi.vessel_id)


# -- correlation ---------------------------------------------------------------

@dataclass
class CorrelationReport:
    matrix: np.ndarray  # diagonal and constant-row entries are NaN
    z_depths: np.ndarray
    averages: Dict[Tuple[str, int], float] = field(default_factory=dict)


def pearson_matrix(traces: Union[TraceMatrix, np.ndarray]):
    """Pearson r between every pair of rows; diagonal and constant rows masked with NaN."""
    x = traces.values if isinstance(traces, TraceMatrix) else np.asarray(traces, dtype=np.float64)
    if x.shape[1] < 2:
        raise ValueError("need at least two frames for a correlation")
    centred = x - x.mean(axis=1, keepdims=True)
    norm = np.sqrt((centred ** 2).sum(axis=1))
    ok = norm > 1e-12 * np.maximum(1.0, np.abs(x).max(axis=1))
    unit = np.zeros_like(centred)
    unit[ok] = centred[ok] / norm[ok, None]
    r = np.clip(unit @ unit.T, -1.0, 1.0)
    r[~ok, :] = np.nan
    r[:, ~ok] = np.nan
    np.fill_diagonal(r, np.nan)
    return r


def _depth_mask(traces, z_max):
    depths = traces.z_depths if isinstance(traces, TraceMatrix) else np.arange(len(traces))
    if z_max == "max" or z_max is None:
        return np.ones(len(depths), dtype=bool)
    return depths <= float(z_max)


def avg_neighbor_correlation(traces, z_max="max", n=5, matrix=None):
    """Mean Pearson r over slice pairs at most ``n`` rows apart, both no deeper than ``z_max``.

    Averages over pairs (not per slice); masked entries are skipped.
    """
    if n < 1:
        raise ValueError("neighbour count n must be >= 1")
    r = pearson_matrix(traces) if matrix is None else matrix
    keep = _depth_mask(traces, z_max)
    idx = np.flatnonzero(keep)
    i, j = np.meshgrid(idx, idx, indexing="ij")
    sel = (i < j) & (j - i <= n)
    vals = r[i[sel], j[sel]]
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        raise ValueError(f"no slice pairs qualify for z_max={z_max}, n={n}")
    return float(vals.mean())


def correlation_report(traces: TraceMatrix, z_max_list=("max",), n_list=(5,)):
    r = pearson_matrix(traces)
    report = CorrelationReport(r, traces.z_depths.copy())
    for z_max in z_max_list:
        for n in n_list:
            key = (str(z_max), int(n))
            try:
                report.averages[key] = avg_neighbor_correlation(traces, z_max, n, matrix=r)
            except ValueError:
                report.averages[key] = float("nan")
    return report


# -- filtering -----------------------------------------------------------------

def lowpass(x, frame_rate, cutoff_hz=1.0, order=4):
    """Zero-phase Butterworth low-pass along the last axis (forward then backward)."""
    if not frame_rate > 2 * cutoff_hz:
        raise ValueError(f"cutoff {cutoff_hz} Hz is not below the Nyquist frequency "
                         f"{frame_rate / 2} Hz")
    if not cutoff_hz > 0:
        raise ValueError("cutoff must be positive")
    sos = signal.butter(order, cutoff_hz, btype="low", fs=frame_rate, output="sos")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] <= 3 * (2 * len(sos) + 1):
        raise ValueError(f"trace of {x.shape[-1]} samples is too short for the filter")
    return signal.sosfiltfilt(sos, x, axis=-1)


def lowpass_traces(traces: TraceMatrix, cutoff_hz=1.0, order=4):
    return traces.with_values(lowpass(traces.values, traces.frame_rate, cutoff_hz, order))


# -- onsets --------------------------------------------------------------------

@dataclass
class OnsetParams:
    kappa: float = 2.0
    fraction: float = 0.2
    min_rel_threshold: float = 0.05
    baseline_tol: Optional[float] = 0.5


@dataclass
class OnsetEvent:
    event_id: int
    kind: str
    start_s: float
    end_s: float
    onsets: Dict[int, float]  # z index -> onset seconds


@dataclass
class OnsetTable:
    events: List[OnsetEvent]
    z_indices: List[int]
    z_depths: np.ndarray

    def rows(self):
        depth_of = dict(zip(self.z_indices, self.z_depths))
        for ev in self.events:
            for z, t in sorted(ev.onsets.items()):
                yield ev.event_id, ev.kind, float(depth_of[z]), float(t)


def _runs(mask):
    """Half-open index ranges of consecutive True values."""
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return list(zip(edges[::2], edges[1::2]))


def robust_std(x):
    x = np.asarray(x, dtype=np.float64)
    return 1.4826 * float(np.median(np.abs(x - np.median(x))))


def detect_onsets(traces: TraceMatrix, kind="dilation", params: Optional[OnsetParams] = None):
    """Locate events on the depth-averaged derivative and time each slice's onset.

    An event is a run where the derivative of the mean trace exceeds
    ``kappa`` robust standard deviations (or ``min_rel_threshold`` of its
    peak magnitude, whichever is larger), extended back to where the rise
    begins and forward to the mean trace's turning point. Each slice's
    onset is the first linearly interpolated crossing of ``fraction`` of
    its own baseline-to-peak excursion, searched up to one more window
    length after the turning point. Constrictions mirror this on the
    negated traces.

    With ``baseline_tol`` set, a window is dropped when the mean trace
    starts it further than ``baseline_tol`` times the window's excursion
    below the trace median: that is the recovery from an opposite event,
    not a new one.
    """
    if kind not in ("dilation", "constriction"):
        raise ValueError(f"kind must be dilation or constriction, got {kind!r}")
    p = params or OnsetParams()
    sign = 1.0 if kind == "dilation" else -1.0
    x = sign * traces.values
    T = x.shape[1]
    empty = OnsetTable([], list(traces.z_indices), traces.z_depths.copy())
    if T < 3:
        return empty
    mean = x.mean(axis=0)
    d = np.gradient(mean) * traces.frame_rate
    peak = float(np.abs(d).max())
    if peak == 0:
        return empty
    theta = max(p.kappa * robust_std(d), p.min_rel_threshold * peak)
    windows = []
    for a, b in _runs(d > theta):
        s = a
        while s > 0 and d[s - 1] > 0:
            s -= 1
        e = b
        while e < T and d[e] > 0:
            e += 1
        if windows and s <= windows[-1][1]:
            windows[-1] = (windows[-1][0], max(e, windows[-1][1]))
        else:
            windows.append((s, e))
    if p.baseline_tol is not None:
        level = float(np.median(mean))
        windows = [(s, e) for s, e in windows
                   if level - mean[s] <= p.baseline_tol * (mean[min(e, T - 1)] - mean[s])]
    events = []
    for k, (s, e) in enumerate(windows):
        next_start = windows[k + 1][0] if k + 1 < len(windows) else T
        stop = min(next_start, T, e + (e - s) + 1)
        onsets = {}
        for row, z in enumerate(traces.z_indices):
            seg = x[row, s:stop]
            ipk = int(np.argmax(seg))
            ibase = int(np.argmin(seg[:ipk + 1]))
            amp = seg[ipk] - seg[ibase]
            if not amp > 0:
                continue
            level = seg[ibase] + p.fraction * amp
            above = np.flatnonzero(seg[ibase:ipk + 1] >= level)
            j = ibase + int(above[0])
            if j == ibase:
                t_idx = float(j)
            else:
                y0, y1 = seg[j - 1], seg[j]
                t_idx = (j - 1) + (level - y0) / (y1 - y0)
            onsets[z] = (s + t_idx) / traces.frame_rate
        events.append(OnsetEvent(k, kind, s / traces.frame_rate, (stop - 1) / traces.frame_rate,
                                 onsets))
    return OnsetTable(events, list(traces.z_indices), traces.z_depths.copy())


def onset_depth_ordering(onsets: Sequence[float], depths: Sequence[float]):
    """Spearman rank correlation between depth and onset time."""
    onsets = np.asarray(onsets, dtype=float)
    depths = np.asarray(depths, dtype=float)
    if onsets.shape != depths.shape:
        raise ValueError("onsets and depths must align")
    if onsets.size < 3:
        raise ValueError("need at least three slices for a depth ordering")
    return float(stats.spearmanr(depths, onsets)[0])


def event_ordering(table: OnsetTable, event_id):
    ev = table.events[event_id]
    depth_of = dict(zip(table.z_indices, table.z_depths))
    zs = sorted(ev.onsets)
    return onset_depth_ordering([ev.onsets[z] for z in zs], [depth_of[z] for z in zs])


# -- diameters -----------------------------------------------------------------

def measure_diameter(seg, roi: VesselROI, z, pixel_size=(1.0, 1.0), threshold=0.5):
    """Equivalent-circle diameter of the largest connected in-ROI component at slice ``z``."""
    seg = np.asarray(seg.data if hasattr(seg, "data") else seg)
    y0, y1, x0, x1 = roi.rect(z)
    patch = seg[z, y0:y1, x0:x1] >= threshold
    labels, count = ndimage.label(patch, structure=np.ones((3, 3)))
    if count == 0:
        raise ValueError(f"empty cross-section for vessel {roi.vessel_id} at slice {z}")
    area = int(np.bincount(labels.ravel())[1:].max())
    return 2.0 * math.sqrt(area * pixel_size[0] * pixel_size[1] / math.pi)


@dataclass
class RatioSummary:
    mean: float
    std: float
    per_vessel: Dict[int, float]


def diameter_ratio(seg_x1, seg_x2, rois_x1: Sequence[VesselROI], rois_x2: Sequence[VesselROI],
                   threshold=0.5):
    """Per-vessel ratio of the x2 to the x1 diameter, in pixel units, averaged over shared slices.

    Slices where either cross-section is empty are skipped; a vessel with no
    usable slice is left out of the summary.
    """
    by_id = {r.vessel_id: r for r in rois_x2}
    ratios = {}
    for r1 in rois_x1:
        r2 = by_id.get(r1.vessel_id)
        if r2 is None:
            continue
        d1, d2 = [], []
        for z in sorted(set(r1.z_indices) & set(r2.z_indices)):
            try:
                a = measure_diameter(seg_x1, r1, z, threshold=threshold)
                b = measure_diameter(seg_x2, r2, z, threshold=threshold)
            except ValueError:
                continue
            d1.append(a)
            d2.append(b)
        if d1:
            ratios[r1.vessel_id] = float(np.mean(d2) / np.mean(d1))
    if not ratios:
        raise ValueError("no vessel has a measurable cross-section at both magnifications")
    vals = np.array(list(ratios.values()))
    return RatioSummary(float(vals.mean()), float(vals.std()), ratios)


# -- CSV -------------------------------------------------------------------------

def _fmt(v):
    return "nan" if not np.isfinite(v) else f"{v:.9g}"


def write_traces_csv(traces: TraceMatrix, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_seconds"] + [f"z_{z}" for z in traces.z_indices])
        for t, col in zip(traces.times(), traces.values.T):
            w.writerow([_fmt(t)] + [_fmt(v) for v in col])


def write_correlation_table(reports: Dict[str, CorrelationReport], path):
    """One row per method, one column per ``(z_max, n)`` pair."""
    keys = sorted({k for r in reports.values() for k in r.averages}, key=lambda k: (k[0], k[1]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method"] + [f"z_max={zm};n={n}" for zm, n in keys])
        for method, rep in reports.items():
            w.writerow([method] + [_fmt(rep.averages.get(k, float("nan"))) for k in keys])


def write_matrix_csv(report: CorrelationReport, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["z_um"] + [_fmt(d) for d in report.z_depths])
        for d, row in zip(report.z_depths, report.matrix):
            w.writerow([_fmt(d)] + [_fmt(v) for v in row])


def write_onsets_csv(table: OnsetTable, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["event_id", "kind", "z_um", "onset_s"])
        for event_id, kind, z_um, onset in table.rows():
            w.writerow([event_id, kind, _fmt(z_um), _fmt(onset)])


# -- SVG -------------------------------------------------------------------------

def _svg(width, height, body):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n<rect width="100%" height="100%" fill="white"/>\n'
            + "\n".join(body) + "\n</svg>\n")


def svg_traces(traces: TraceMatrix, width=640, height=360):
    t = traces.times()
    v = traces.values
    lo, hi = float(v.min()), float(v.max())
    span = hi - lo or 1.0
    tmax = float(t[-1]) or 1.0
    body = []
    n = len(traces.z_indices)
    for k, row in enumerate(v):
        hue = int(240 * k / max(n - 1, 1))
        pts = " ".join(f"{40 + (width - 60) * ti / tmax:.2f},{height - 30 - (height - 50) * (y - lo) / span:.2f}"
                       for ti, y in zip(t, row))
        body.append(f'<polyline fill="none" stroke="hsl({hue},70%,45%)" stroke-width="1" points="{pts}"/>')
    body.append(f'<text x="{width / 2}" y="{height - 8}" font-size="12" text-anchor="middle">time (s)</text>')
    return _svg(width, height, body)


def svg_matrix(report: CorrelationReport, cell=12):
    m = report.matrix
    n = m.shape[0]
    size = 40 + n * cell
    body = []
    for i in range(n):
        for j in range(n):
            v = m[i, j]
            if np.isfinite(v):
                c = int(round(255 * (1 - (v + 1) / 2)))
                fill = f"rgb(255,{c},{c})" if v >= 0 else f"rgb({255 - c},{255 - c},255)"
            else:
                fill = "rgb(200,200,200)"
            body.append(f'<rect x="{20 + j * cell}" y="{20 + i * cell}" width="{cell}" height="{cell}" fill="{fill}"/>')
    return _svg(size, size, body)


def svg_onsets(table: OnsetTable, width=480, height=360):
    """Onset time against depth, one polyline per event."""
    pts_all = [(d, t) for _, _, d, t in table.rows()]
    if not pts_all:
        return _svg(width, height, [])
    dmin, dmax = min(p[0] for p in pts_all), max(p[0] for p in pts_all)
    tmin, tmax = min(p[1] for p in pts_all), max(p[1] for p in pts_all)
    ds, ts = (dmax - dmin) or 1.0, (tmax - tmin) or 1.0
    body = []
    for ev in table.events:
        depth_of = dict(zip(table.z_indices, table.z_depths))
        pts = " ".join(f"{40 + (width - 60) * (ev.onsets[z] - tmin) / ts:.2f},"
                       f"{20 + (height - 50) * (depth_of[z] - dmin) / ds:.2f}" for z in sorted(ev.onsets))
        color = "crimson" if ev.kind == "dilation" else "steelblue"
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
    body.append(f'<text x="{width / 2}" y="{height - 8}" font-size="12" text-anchor="middle">onset (s)</text>')
    return _svg(width, height, body)
