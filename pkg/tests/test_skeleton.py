import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from vasotrack import autodiff as ad
from vasotrack.selftest import canonical_shapes, line_is_fixed_point, skeleton_matches, skeleton_oracle
from vasotrack.skeleton import SkeletonConfig, classical_skeleton, skeletonize

binary = hnp.arrays(np.float32, (6, 6, 6), elements=st.sampled_from([0.0, 1.0]))


def test_oracle_random_and_canonical():
    ok, fails = skeleton_oracle(100)
    assert ok, f"{fails} mismatches"


@pytest.mark.parametrize("name", ["line", "L", "tube", "ball"])
@pytest.mark.parametrize("n", range(6))
def test_canonical_shapes(name, n):
    assert skeleton_matches(canonical_shapes()[name], n)


def test_thin_line_fixed_point():
    assert line_is_fixed_point(5)


@given(binary, st.integers(0, 5))
def test_binary_property_matches_oracle(v, n):
    assert skeleton_matches(v, n)


@given(binary, st.integers(0, 5))
def test_skeleton_subset_of_input(v, n):
    assert not (classical_skeleton(v, n) & ~v.astype(bool)).any()


@given(hnp.arrays(np.float32, (5, 5, 5), elements=st.floats(0, 1, width=32)))
def test_soft_skeleton_bounded_by_input(x):
    k = skeletonize(ad.Tensor(x), SkeletonConfig(n=3)).data
    assert (k >= 0).all() and (k <= x + 1e-12).all()


def test_n_zero_is_identity(rng):
    x = rng.random((4, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(skeletonize(ad.Tensor(x), SkeletonConfig(n=0)).data, x)


def test_pre_threshold_binarizes_and_cuts_gradient(rng):
    x = ad.Tensor(rng.random((4, 4, 4)), requires_grad=True)
    k = skeletonize(x, SkeletonConfig(n=2, pre_threshold=0.5))
    assert np.isin(k.data, (0, 1)).all()
    assert not k.requires_grad


def test_config_validation():
    with pytest.raises(ValueError):
        SkeletonConfig(n=-1)
    with pytest.raises(ValueError):
        SkeletonConfig(pre_threshold=1.0)
    with pytest.raises(ValueError):
        classical_skeleton(np.full((3, 3, 3), 0.5), 1)
