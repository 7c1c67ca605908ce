import numpy as np
import pytest
from hypothesis import given, strategies as st

from vasotrack import autodiff as ad
from vasotrack.selftest import gradcheck_cases, gradcheck_suite


@pytest.mark.parametrize("case", gradcheck_cases(), ids=lambda c: c[0])
def test_op_gradcheck(case):
    name, f, x, tol = case
    h = 1e-5 if tol <= 1e-4 else 1e-3
    rep = ad.grad_check(f, x, h=h, tol=tol, max_points=64)
    assert rep.passed, f"{name}: {rep}"


def test_suite_covers_losses():
    reports = gradcheck_suite(max_points=16)
    assert {"compound_wrt_s", "temporal_wrt_s"} <= set(reports)
    assert all(r.passed for r in reports.values())


def test_grad_check_detects_wrong_gradient():
    def bad_square(t):
        out = ad.Tensor._node(t.data ** 2, (t,), lambda g: (g * t.data,), "bad")  # missing factor 2
        return ad.sum(out)
    rep = ad.grad_check(bad_square, np.array([0.3, 0.7, 1.2]))
    assert not rep.passed


def test_backward_accumulates_shared_subexpressions():
    x = ad.Tensor(np.array([2.0]), requires_grad=True)
    y = ad.add(ad.mul(x, x), x)  # x^2 + x
    ad.backward(ad.sum(y))
    np.testing.assert_allclose(x.grad, [5.0])


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(ad.mul(x, 2.0))


def test_broadcast_mismatch_raises():
    with pytest.raises(ValueError):
        ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((3, 2))))


def test_non_finite_leaf_rejected():
    with pytest.raises(ValueError):
        ad.Tensor(np.array([np.nan]))


def test_log_is_guarded_at_zero():
    out = ad.log(ad.Tensor(np.zeros(2)))
    assert np.all(np.isfinite(out.data))


def test_spatial_gradient_l1_values():
    x = np.zeros((2, 2, 2))
    x[0, 0, 0] = 1.0
    g = ad.spatial_gradient_l1(ad.Tensor(x)).data
    assert g[0, 0, 0] == 3.0  # three forward neighbours differ by 1
    assert g[1, 1, 1] == 0.0


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_sigmoid_matches_closed_form(a, b):
    x = np.array([a, b])
    np.testing.assert_allclose(ad.sigmoid(ad.Tensor(x, dtype=np.float64)).data,
                               1 / (1 + np.exp(-x)), rtol=1e-12)


def test_precision_context_restores():
    with ad.precision(np.float64):
        assert ad.Tensor([1.0]).dtype == np.float64
    assert ad.Tensor([1.0]).dtype == np.float32


def test_conv3d_matches_direct_sum(rng):
    x = rng.normal(size=(4, 5, 6, 2))
    w = rng.normal(size=(3, 3, 3, 2, 3))
    out = ad.conv3d(ad.Tensor(x, dtype=np.float64), ad.Tensor(w, dtype=np.float64)).data
    pad = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)), mode="edge")
    z, y, xx = 2, 1, 4
    ref = np.einsum("abci,abcio->o", pad[z:z + 3, y:y + 3, xx:xx + 3], w)
    np.testing.assert_allclose(out[z, y, xx], ref, rtol=1e-10)


def test_detach_cuts_gradient():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    y = ad.sum(ad.mul(x.detach(), x))
    ad.backward(y)
    np.testing.assert_allclose(x.grad, np.ones(3))
