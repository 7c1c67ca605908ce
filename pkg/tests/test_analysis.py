import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp
from scipy import signal, stats

from vasotrack import analysis as A
from vasotrack.volume import Movie4D, VesselROI


def _traces(values, rate=10.0, dz=10.0):
    values = np.asarray(values, dtype=float)
    z = list(range(values.shape[0]))
    return A.TraceMatrix(values, z, dz * np.arange(len(z)), rate)


def test_vessel_trace_sums_roi():
    seg = np.zeros((3, 2, 6, 6), np.float32)
    seg[:, 0, 1:3, 1:3] = 1
    seg[1, 1, 2:5, 2:5] = 0.5
    movie = Movie4D(seg, 5.0, (4.0, 1.0, 1.0))
    roi = VesselROI(7, {0: (0, 4, 0, 4), 1: (2, 5, 2, 5)})
    tr = A.vessel_trace(movie, roi)
    np.testing.assert_allclose(tr.values, [[4, 4, 4], [0, 4.5, 0]])
    np.testing.assert_allclose(tr.z_depths, [0, 4])
    weighted = A.vessel_trace(movie, roi, intensity_movie=movie.with_data(seg * 2))
    np.testing.assert_allclose(weighted.values[0], 8)
    with pytest.raises(ValueError, match="co-registered"):
        A.vessel_trace(movie, roi, intensity_movie=Movie4D(np.zeros((3, 2, 6, 5))))


@given(hnp.arrays(np.float64, (5, 12), elements=st.floats(-10, 10)))
def test_pearson_matches_numpy(x):
    r = A.pearson_matrix(x)
    centred = x - x.mean(axis=1, keepdims=True)
    ok = np.sqrt((centred ** 2).sum(axis=1)) > 1e-12 * np.maximum(1, np.abs(x).max(axis=1))
    assert np.isnan(np.diag(r)).all()
    assert np.isnan(r[~ok]).all()
    if ok.sum() >= 2:
        ref = np.corrcoef(x[ok])
        off = ~np.eye(ok.sum(), dtype=bool)
        np.testing.assert_allclose(r[np.ix_(ok, ok)][off], ref[off], atol=1e-8)
    sym = np.nan_to_num(r)
    np.testing.assert_allclose(sym, sym.T)


def test_constant_row_masked():
    x = np.array([[1.0, 2.0, 3.0], [5.0, 5.0, 5.0], [3.0, 1.0, 2.0]])
    r = A.pearson_matrix(x)
    assert np.isnan(r[1]).all() and np.isnan(r[:, 1]).all()
    assert np.isfinite(r[0, 2])


def test_avg_neighbor_correlation_pairs():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 50))
    r = A.pearson_matrix(x)
    tr = _traces(x)
    expect = np.mean([r[i, j] for i in range(6) for j in range(i + 1, 6) if j - i <= 2])
    assert A.avg_neighbor_correlation(tr, n=2) == pytest.approx(expect)
    shallow = np.mean([r[i, j] for i in range(3) for j in range(i + 1, 3)])
    assert A.avg_neighbor_correlation(tr, z_max=20.0, n=5) == pytest.approx(shallow)
    with pytest.raises(ValueError):
        A.avg_neighbor_correlation(tr, z_max=-1.0)
    with pytest.raises(ValueError):
        A.avg_neighbor_correlation(tr, n=0)


def test_identical_rows_correlate_perfectly():
    base = np.sin(np.linspace(0, 6, 40))
    tr = _traces(np.stack([base * k + k for k in (1, 2, 3, 4)]))
    assert A.avg_neighbor_correlation(tr) == pytest.approx(1.0)
    rep = A.correlation_report(tr, ("max", 10.0), (1, 5))
    assert set(rep.averages) == {("max", 1), ("max", 5), ("10.0", 1), ("10.0", 5)}


# -- low-pass contract -------------------------------------------------------------

def _gain(freq, fs=60.0, n=6000):
    t = np.arange(n) / fs
    x = np.sin(2 * np.pi * freq * t)
    y = A.lowpass(x, fs, 1.0)
    mid = slice(n // 4, 3 * n // 4)
    return np.abs(y[mid]).max() / np.abs(x[mid]).max()


def test_lowpass_dc_gain():
    y = A.lowpass(np.full(600, 3.7), 60.0)
    np.testing.assert_allclose(y, 3.7, rtol=1e-6)


def test_lowpass_passband_and_stopband():
    assert abs(_gain(0.1) - 1) < 0.01
    assert _gain(10.0) < 0.05


def test_lowpass_zero_phase_symmetric_impulse():
    # long enough for the IIR tail to die out before either edge
    x = np.zeros(2001)
    x[1000] = 1.0
    y = A.lowpass(x, 60.0)
    np.testing.assert_allclose(y, y[::-1], atol=1e-12)
    assert np.argmax(y) == 1000


def test_lowpass_matches_reference_filter():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 400))
    sos = signal.butter(4, 1.0, fs=20.0, output="sos")
    np.testing.assert_allclose(A.lowpass(x, 20.0), signal.sosfiltfilt(sos, x, axis=-1))


def test_lowpass_errors():
    with pytest.raises(ValueError, match="Nyquist"):
        A.lowpass(np.zeros(100), 2.0, 1.0)
    with pytest.raises(ValueError, match="short"):
        A.lowpass(np.zeros(10), 60.0)


# -- onsets ------------------------------------------------------------------------

def _propagating(delays, rate=10.0, T=200, t0=5.0, width=2.0, sign=1.0, base=10.0):
    t = np.arange(T) / rate
    rows = []
    for d in delays:
        tau = np.clip(t - t0 - d, 0, width)
        rows.append(base + sign * 0.5 * (1 - np.cos(2 * np.pi * tau / width)))
    return np.array(rows)


def test_onsets_recover_known_delays():
    delays = np.linspace(0.0, 1.4, 8)[::-1]  # deepest first
    tr = _traces(_propagating(delays))
    table = A.detect_onsets(tr, "dilation")
    assert len(table.events) == 1
    ev = table.events[0]
    truth = 5.0 + delays + 2.0 * np.arccos(1 - 2 * 0.2) / (2 * np.pi)
    got = np.array([ev.onsets[z] for z in range(8)])
    np.testing.assert_allclose(got, truth, atol=0.1)
    assert A.event_ordering(table, 0) == pytest.approx(-1.0)


def test_constriction_mirrors_dilation():
    delays = np.linspace(0.0, 1.4, 8)
    table = A.detect_onsets(_traces(_propagating(delays, sign=-1.0)), "constriction")
    assert len(table.events) == 1
    assert A.event_ordering(table, 0) == pytest.approx(1.0)
    assert A.detect_onsets(_traces(_propagating(delays, sign=-1.0)), "dilation").events == []


def test_flat_traces_have_no_events():
    assert A.detect_onsets(_traces(np.ones((4, 50)))).events == []
    with pytest.raises(ValueError):
        A.detect_onsets(_traces(np.ones((4, 50))), "spasm")


def test_onset_depth_ordering_is_spearman():
    rng = np.random.default_rng(2)
    on, dep = rng.random(9), rng.random(9)
    assert A.onset_depth_ordering(on, dep) == pytest.approx(stats.spearmanr(dep, on)[0])
    with pytest.raises(ValueError):
        A.onset_depth_ordering([1.0, 2.0], [1.0, 2.0])


# -- diameters ---------------------------------------------------------------------

def _disk_volume(radius, size=40):
    yy, xx = np.mgrid[:size, :size] - (size - 1) / 2
    disk = (yy ** 2 + xx ** 2 <= radius ** 2).astype(np.float32)
    return np.stack([disk, disk])


def test_measure_diameter_equivalent_circle():
    seg = _disk_volume(6)
    roi = VesselROI(0, {0: (0, 40, 0, 40), 1: (0, 40, 0, 40)})
    d = A.measure_diameter(seg, roi, 0)
    assert d == pytest.approx(12.0, rel=0.05)
    assert A.measure_diameter(seg, roi, 0, pixel_size=(0.5, 0.5)) == pytest.approx(d / 2)


def test_measure_diameter_uses_largest_component():
    seg = _disk_volume(6)
    seg[0, 0:2, 0:2] = 1  # a speck in the corner
    roi = VesselROI(0, {0: (0, 40, 0, 40)})
    assert A.measure_diameter(seg, roi, 0) == pytest.approx(A.measure_diameter(_disk_volume(6), roi, 0))
    with pytest.raises(ValueError, match="empty"):
        A.measure_diameter(np.zeros((1, 4, 4)), VesselROI(0, {0: (0, 4, 0, 4)}), 0)


def test_diameter_ratio_of_scaled_disks():
    roi = [VesselROI(1, {0: (0, 40, 0, 40), 1: (0, 40, 0, 40)})]
    summ = A.diameter_ratio(_disk_volume(5), _disk_volume(10), roi, roi)
    assert summ.mean == pytest.approx(2.0, rel=0.05)
    assert summ.per_vessel.keys() == {1}
    with pytest.raises(ValueError):
        A.diameter_ratio(_disk_volume(5), _disk_volume(10), roi, [VesselROI(2, {0: (0, 4, 0, 4)})])


# -- output files ------------------------------------------------------------------

def test_csv_writers_deterministic(tmp_path):
    tr = _traces(_propagating(np.linspace(0, 1, 4)))
    for name in ("a", "b"):
        A.write_traces_csv(tr, tmp_path / f"{name}_tr.csv")
        rep = A.correlation_report(tr)
        A.write_matrix_csv(rep, tmp_path / f"{name}_mx.csv")
        A.write_correlation_table({"seg": rep}, tmp_path / f"{name}_tab.csv")
        A.write_onsets_csv(A.detect_onsets(tr), tmp_path / f"{name}_on.csv")
    for suffix in ("tr", "mx", "tab", "on"):
        assert (tmp_path / f"a_{suffix}.csv").read_bytes() == (tmp_path / f"b_{suffix}.csv").read_bytes()
    head = (tmp_path / "a_tr.csv").read_text().splitlines()[0]
    assert head == "t_seconds,z_0,z_1,z_2,z_3"


def test_svgs_are_wellformed():
    import xml.etree.ElementTree as ET
    tr = _traces(_propagating(np.linspace(0, 1, 4)))
    for svg in (A.svg_traces(tr), A.svg_matrix(A.correlation_report(tr)), A.svg_onsets(A.detect_onsets(tr))):
        assert ET.fromstring(svg).tag.endswith("svg")
