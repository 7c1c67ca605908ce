import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from vasotrack import kernels
from vasotrack.morphology import _PLANES, _UNION

compiled_only = pytest.mark.skipif(kernels.BACKEND != "compiled", reason="extension not built")

volumes = hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, min_side=1, max_side=6),
                     elements=st.sampled_from([0.0, 0.25, 0.5, 1.0]))


def _naive(x, offsets, inner_max, outer_max):
    pad = np.pad(x, 1, mode="edge")
    Z, Y, X = x.shape
    out = np.empty_like(x)
    for z in range(Z):
        for y in range(Y):
            for xx in range(X):
                inner = []
                for elem in offsets:
                    vals = [pad[z + 1 + dz, y + 1 + dy, xx + 1 + dx] for dz, dy, dx in elem]
                    inner.append(max(vals) if inner_max else min(vals))
                out[z, y, xx] = max(inner) if outer_max else min(inner)
    return out


@given(volumes, st.booleans(), st.booleans())
def test_python_backend_matches_naive_loop(x, inner_max, outer_max):
    out, src = kernels.window_extreme(x, _PLANES, inner_max, outer_max, backend="python")
    np.testing.assert_array_equal(out, _naive(x, _PLANES, inner_max, outer_max))
    # every output value is read from its recorded source voxel
    np.testing.assert_array_equal(out.ravel(), x.ravel()[src.ravel()])


@compiled_only
@given(volumes, st.booleans(), st.booleans())
def test_backends_agree_including_ties(x, inner_max, outer_max):
    a = kernels.window_extreme(x, _PLANES, inner_max, outer_max, backend="python")
    b = kernels.window_extreme(x, _PLANES, inner_max, outer_max, backend="compiled")
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


@compiled_only
def test_backends_agree_float64_union(rng):
    x = rng.random((5, 7, 6))
    a = kernels.window_extreme(x, _UNION, False, False, backend="python")
    b = kernels.window_extreme(x, _UNION, False, False, backend="compiled")
    assert a[0].dtype == np.float64
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


@pytest.mark.parametrize("backend", ["python", pytest.param("compiled", marks=compiled_only)])
def test_scatter_add_matches_bincount(rng, backend):
    src = rng.integers(0, 50, size=400)
    g = rng.normal(size=400)
    np.testing.assert_allclose(kernels.scatter_add(src, g, 50, backend=backend),
                               np.bincount(src, weights=g, minlength=50))


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.window_extreme(np.zeros((2, 2, 2), np.float32), _PLANES, True, True, backend="gpu")


def test_pure_python_env_forces_fallback():
    code = "import vasotrack.kernels as k; print(k.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                         env={"VASOTRACK_PURE_PYTHON": "1", "PATH": ""}, check=True)
    assert out.stdout.strip() == "python"
