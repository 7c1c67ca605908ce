import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from vasotrack import autodiff as ad
from vasotrack import morphology as M
from vasotrack.selftest import morphology_mismatches, morphology_oracle

binary = hnp.arrays(np.float32, (6, 6, 6), elements=st.sampled_from([0.0, 1.0]))
soft = hnp.arrays(np.float32, (5, 5, 5), elements=st.floats(0, 1, width=32))


def test_nine_planar_elements():
    B = M.ELEMENTS
    assert B.shape == (9, 3, 3, 3)
    assert (B.sum(axis=(1, 2, 3)) == 9).all()
    assert B[:, 1, 1, 1].all()  # every plane passes through the centre
    assert len({b.tobytes() for b in B}) == 9
    # each element is symmetric under point reflection
    assert all((b == b[::-1, ::-1, ::-1]).all() for b in B)


def test_union_is_full_cube():
    # the diagonal planes reach every corner, so the union support is 3x3x3
    assert M.union_element().all()


def test_oracle_200_volumes():
    ok, fails = morphology_oracle(200)
    assert ok, f"{fails} mismatching volumes"


@given(binary)
def test_binary_inputs_match_oracle(v):
    assert morphology_mismatches(v) == []


@given(soft)
def test_ordering_si_is_erosion_dilation(x):
    t = ad.Tensor(x)
    e, d = M.erosion(t).data, M.dilation(t).data
    s, i = M.si(t).data, M.is_(t).data
    assert (e <= s + 1e-12).all() and (s <= x + 1e-12).all()
    assert (x <= i + 1e-12).all() and (i <= d + 1e-12).all()
    assert (M.open_(t).data <= x + 1e-12).all()


@given(soft)
def test_open_is_idempotent(x):
    once = M.open_(ad.Tensor(x)).data
    np.testing.assert_array_equal(M.open_(ad.Tensor(once)).data, once)


@given(soft, st.floats(0, 1))
def test_monotone_under_threshold(x, c):
    # flat morphology commutes with thresholding
    t = M.si(ad.Tensor(x)).data >= c
    ref = M.binary_si((x >= c).astype(np.float32))
    np.testing.assert_array_equal(t, ref)


def test_si_is_fixed_on_thick_slab():
    x = np.zeros((10, 10, 10))
    x[2:7] = 1
    t = ad.Tensor(x)
    np.testing.assert_array_equal(M.si(M.is_(t)).data, x)


def test_composed_reference_agrees(rng):
    x = rng.random((5, 6, 7)).astype(np.float32)
    np.testing.assert_array_equal(M.si(ad.Tensor(x)).data, M.si_composed(ad.Tensor(x)).data)
    np.testing.assert_array_equal(M.is_(ad.Tensor(x)).data, M.is_composed(ad.Tensor(x)).data)


def test_gradient_routed_to_one_source(rng):
    x = ad.Tensor(rng.random((4, 4, 4)), requires_grad=True)
    ad.backward(ad.sum(M.si(x)))
    g = x.grad
    assert g.sum() == pytest.approx(64.0)
    assert np.all(g == np.round(g))  # integer counts of how often each voxel was picked


def test_binary_oracle_rejects_soft_input():
    with pytest.raises(ValueError):
        M.binary_si(np.full((3, 3, 3), 0.5))


def test_element_offsets_requires_equal_sizes():
    E = np.zeros((2, 3, 3, 3), bool)
    E[0, 1, 1, 1] = True
    E[1, :, 1, 1] = True
    with pytest.raises(ValueError):
        M.element_offsets(E)
