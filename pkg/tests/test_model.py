import numpy as np
import pytest

from vasotrack import autodiff as ad
from vasotrack import model as M

SMALL = M.ModelConfig(stage_channels=[4, 8], blocks_per_stage=1, head_channels=2, mu=1)


def test_defaults():
    cfg = M.ModelConfig()
    assert cfg.stage_channels == [8, 16, 32] and cfg.mu == 3 and cfg.threshold == 0.5
    assert cfg.total_stride == 8


@pytest.mark.parametrize("kw", [dict(stage_channels=[8]), dict(mu=-1), dict(threshold=1.0),
                                dict(blocks_per_stage=0), dict(foreground_prior=0.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        M.ModelConfig(**kw)


def test_forward_shapes_and_ranges(rng):
    x = rng.random((8, 8, 16)).astype(np.float32)
    res = M.forward(x, M.init_params(SMALL), SMALL)
    for t in (res.s_bar, res.s, res.i_rec):
        assert t.shape == x.shape
        assert (t.data >= 0).all() and (t.data <= 1).all()
    np.testing.assert_array_equal(res.binary, res.s.data >= 0.5)


def test_indivisible_dims_rejected(rng):
    with pytest.raises(ValueError, match="divisible"):
        M.forward(rng.random((8, 8, 6)), M.init_params(SMALL), SMALL)


def test_init_deterministic_and_prior():
    a, b = M.init_params(SMALL, seed=3), M.init_params(SMALL, seed=3)
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["enc.stem.w"], M.init_params(SMALL, seed=4)["enc.stem.w"])
    assert 1 / (1 + np.exp(-a["seg.head.b"][0])) == pytest.approx(SMALL.foreground_prior)


def test_param_shapes_match_init():
    p = M.init_params(SMALL)
    assert {k: v.shape for k, v in p.items()} == M.param_shapes(SMALL)


def test_mu_zero_means_no_smoothing(rng):
    cfg = M.ModelConfig(stage_channels=[4, 8], blocks_per_stage=1, head_channels=2, mu=0)
    res = M.forward(rng.random((8, 8, 8)), M.init_params(cfg), cfg, with_rec=False)
    np.testing.assert_array_equal(res.s.data, res.s_bar.data)
    assert res.i_rec is None


def test_every_parameter_receives_gradient(rng):
    p = {k: ad.Tensor(v, requires_grad=True) for k, v in M.init_params(SMALL).items()}
    res = M.forward(rng.random((8, 8, 8)).astype(np.float32), p, SMALL)
    ad.backward(ad.add(ad.sum(res.s), ad.sum(res.i_rec)))
    missing = [k for k, t in p.items() if t.grad is None]
    assert missing == []
