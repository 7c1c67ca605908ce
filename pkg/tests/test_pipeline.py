import numpy as np
import pytest

from vasotrack import losses as L
from vasotrack import model as M
from vasotrack import pipeline as P
from vasotrack.skeleton import SkeletonConfig
from vasotrack.volume import Movie4D

SMALL = M.ModelConfig(stage_channels=[4, 8], blocks_per_stage=1, head_channels=2, mu=1)


def _movie(seed=0, T=3, dims=(8, 8, 8)):
    rng = np.random.default_rng(seed)
    data = rng.random((T, *dims)).astype(np.float32) * 0.2
    data[:, :, 3:5, 3:5] += 0.8
    return Movie4D(data, 10.0)


def _cfg(**kw):
    base = dict(steps_static=3, steps_temporal=4, learning_rate=1e-3,
                skeleton=SkeletonConfig(n=1))
    base.update(kw)
    return P.TrainConfig(**base)


def test_train_config_coerces_dicts_and_validates():
    cfg = P.TrainConfig(loss={"lambda1": 2.0}, skeleton={"n": 3})
    assert cfg.loss.lambda1 == 2.0 and cfg.skeleton.n == 3
    for kw in (dict(learning_rate=0), dict(steps_static=-1), dict(temporal_mode="x"), dict(beta1=1.0)):
        with pytest.raises(ValueError):
            P.TrainConfig(**kw)


def test_stage_rng_independent_and_reproducible():
    a = P.stage_rng(0, "static").random(3)
    assert np.array_equal(a, P.stage_rng(0, "static").random(3))
    assert not np.array_equal(a, P.stage_rng(0, "temporal").random(3))


def test_adam_first_step_moves_by_lr():
    params = {"w": np.array([1.0, -2.0], np.float32)}
    opt = P.Adam(params, lr=0.1)
    opt.step(params, {"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(params["w"], [0.9, -1.9], rtol=1e-5)


def test_adam_minimizes_quadratic():
    params = {"w": np.array([5.0])}
    opt = P.Adam(params, lr=0.1)
    for _ in range(500):
        opt.step(params, {"w": 2 * params["w"]})
    assert abs(params["w"][0]) < 0.05


def test_stretch():
    np.testing.assert_array_equal(P.stretch(np.full((2, 2), 3.0)), 0.0)
    out = P.stretch(np.array([1.0, 2.0, 5.0]))
    np.testing.assert_allclose(out, [0, 0.25, 1])


def test_zero_steps_returns_init():
    res = P.train_static(_movie(), _cfg(steps_static=0), SMALL)
    init = M.init_params(SMALL, seed=int(P.stage_rng(0, "static").integers(2**31)))
    assert res.log == []
    assert all(np.array_equal(res.params[k], init[k]) for k in init)


def test_static_training_deterministic_and_logs():
    a = P.train_static(_movie(), _cfg(), SMALL)
    b = P.train_static(_movie(), _cfg(), SMALL)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert [r["step"] for r in a.log] == [0, 1, 2]
    assert a.anchor.shape == (8, 8, 8)
    assert all(r["l_skel"] is None for r in a.log)


def test_divergence_reports_step():
    bad = {k: v.copy() for k, v in M.init_params(SMALL).items()}
    bad["enc.stem.scale"][:] = np.float32(3e38)  # finite leaves, overflowing activations
    with pytest.raises(P.TrainingDiverged) as exc, np.errstate(all="ignore"):
        P.train_static(_movie(), _cfg(), SMALL, params=bad)
    assert exc.value.step == 0


def test_crop_required_over_budget():
    with pytest.raises(ValueError, match="voxel budget"):
        P.train_static(_movie(), _cfg(voxel_budget=100), SMALL)
    res = P.train_static(_movie(dims=(8, 16, 16)), _cfg(voxel_budget=600, crop_size=[8, 8, 8]), SMALL)
    assert len(res.log) == 3


def test_temporal_joint_and_per_frame():
    m = _movie()
    st = P.train_static(m, _cfg(), SMALL)
    params, log = P.train_temporal(m, st.anchor, st.params, _cfg(), SMALL)
    assert isinstance(params, dict) and len(log) == 4
    assert sorted(r["frame"] for r in log[:3]) == [0, 1, 2]  # first epoch visits every frame once
    assert all(r["l_skel"] is not None for r in log)
    per, plog = P.train_temporal(m, st.anchor, st.params, _cfg(temporal_mode="per_frame", steps_temporal=1), SMALL)
    assert len(per) == 3 and len(plog) == 3


def test_temporal_anchor_dims_checked():
    m = _movie()
    with pytest.raises(ValueError, match="anchor"):
        P.train_temporal(m, np.zeros((8, 8, 16)), M.init_params(SMALL), _cfg(), SMALL)


def test_segment_movie_framewise_pure_and_threaded():
    m = _movie(T=4)
    params = M.init_params(SMALL)
    full = P.segment_movie(m, params, SMALL, with_skeletons=True).s.data
    perm = [2, 0, 3, 1]
    permuted = P.segment_movie(m.with_data(m.data[perm]), params, SMALL, threads=2).s.data
    np.testing.assert_array_equal(permuted, full[perm])
    single = P.segment_movie(m.with_data(m.data[1:2]), params, SMALL).s.data
    np.testing.assert_array_equal(single[0], full[1])


def test_segment_movie_dims_mismatch():
    with pytest.raises(ValueError, match="training dims"):
        P.segment_movie(_movie(), M.init_params(SMALL), SMALL, train_dims=(8, 8, 16))


def test_checkpoint_round_trip(tmp_path):
    params = M.init_params(SMALL, seed=5)
    P.save_checkpoint(params, tmp_path / "c.v4dp", SMALL, (8, 8, 8))
    ck = P.load_checkpoint(tmp_path / "c.v4dp")
    assert ck.params.keys() == params.keys()
    assert all(ck.params[k].tobytes() == params[k].tobytes() for k in params)
    assert ck.model_cfg == SMALL and tuple(ck.train_dims) == (8, 8, 8)
    P.save_checkpoint(params, tmp_path / "d.v4dp", SMALL, (8, 8, 8))
    assert (tmp_path / "c.v4dp").read_bytes() == (tmp_path / "d.v4dp").read_bytes()


@pytest.mark.parametrize("mutate", ["magic", "truncate", "flip", "version"])
def test_checkpoint_corruption(tmp_path, mutate):
    p = tmp_path / "c.v4dp"
    P.save_checkpoint(M.init_params(SMALL), p, SMALL)
    raw = bytearray(p.read_bytes())
    if mutate == "magic":
        raw[:4] = b"NOPE"
    elif mutate == "truncate":
        raw = raw[:-100]
    elif mutate == "flip":
        raw[len(raw) // 2] ^= 0xFF
    else:
        raw[4] = 7
    p.write_bytes(bytes(raw))
    with pytest.raises(P.CheckpointError):
        P.load_checkpoint(p)


def test_loss_csv_format(tmp_path):
    res = P.train_static(_movie(), _cfg(steps_static=2), SMALL)
    P.write_loss_csv(res.log, tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == L.LOSS_CSV_HEADER
    assert len(lines) == 3 and lines[1].startswith("0,") and lines[1].endswith(",")
