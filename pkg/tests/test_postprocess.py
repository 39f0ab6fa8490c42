import numpy as np
import pytest

from gesturegen import metrics
from gesturegen import postprocess as pp
from gesturegen.motion_io import MotionSequence, hip_center
from oracles import one_euro_scalar


def motion(pos, fps=20):
    pos = np.asarray(pos, dtype=float)
    if pos.ndim == 1:
        pos = np.stack([pos, np.zeros_like(pos), np.zeros_like(pos)], axis=1)
    return MotionSequence(fps, [f"j{i}" for i in range(pos.shape[1] // 3)], pos)


def test_moving_average_examples():
    const = motion(np.full((9, 6), 4.2))
    np.testing.assert_allclose(pp.moving_average(const, 5).positions, const.positions, rtol=1e-14)
    impulse = pp.moving_average(motion([0, 0, 1, 0, 0.0]), 5).positions[:, 0]
    assert impulse[2] == pytest.approx(0.2)
    # shrinking edge windows: frame 0 averages frames 0..2
    assert impulse[0] == pytest.approx(1 / 3)
    rng = np.random.default_rng(0)
    m = motion(rng.normal(size=(10, 6)))
    np.testing.assert_array_equal(pp.moving_average(m, 1).positions, m.positions)
    with pytest.raises(ValueError):
        pp.moving_average(m, 4)
    with pytest.raises(ValueError):
        pp.moving_average(m, 0)


def test_moving_average_interior_mean():
    rng = np.random.default_rng(1)
    for _ in range(20):
        core = rng.normal(size=int(rng.integers(1, 40)))
        # edge values repeated for a full window on each side
        x = np.concatenate([np.full(4, core[0]), core, np.full(4, core[-1])])
        out = pp.moving_average(motion(x), 5).positions[:, 0]
        assert abs(out[2:-2].mean() - x[2:-2].mean()) < 1e-9


def test_moving_average_lowers_jerk_on_white_noise():
    wins = 0
    for seed in range(100):
        m = motion(np.random.default_rng(seed).normal(size=(60, 9)))
        wins += metrics.mean_derivative(pp.moving_average(m, 5), 3) < metrics.mean_derivative(m, 3)
    assert wins >= 99


def test_one_euro_constant_and_step():
    const = motion(np.full((20, 3), 7.5))
    np.testing.assert_array_equal(pp.one_euro(const).positions, const.positions)
    step = np.concatenate([np.zeros(5), np.ones(200)])
    out = pp.one_euro(motion(step)).positions[:, 0]
    assert out[0] == 0.0
    assert np.all(np.diff(out) >= 0)
    assert abs(out[-1] - 1) < 1e-3
    np.testing.assert_allclose(out, one_euro_scalar(step, 20.0, 1.0, 0.01, 1.0), atol=1e-12)


def test_one_euro_large_beta_tracks_ramp():
    ramp = np.arange(50) * 10.0
    out = pp.one_euro(motion(ramp), pp.OneEuroParams(1.0, 1e6, 1.0)).positions[:, 0]
    assert np.abs(out[1:] - ramp[1:]).max() < 1e-3


def test_one_euro_beta_zero_is_exponential_filter():
    rng = np.random.default_rng(2)
    for _ in range(3):
        x = rng.normal(size=80)
        out = pp.one_euro(motion(x), pp.OneEuroParams(2.0, 0.0, 1.0)).positions[:, 0]
        a = 1 / (1 + 20 / (2 * np.pi * 2.0))
        ref = [x[0]]
        for v in x[1:]:
            ref.append(a * v + (1 - a) * ref[-1])
        np.testing.assert_allclose(out, ref, atol=1e-9)


def test_one_euro_params_validation():
    with pytest.raises(ValueError):
        pp.OneEuroParams(min_cutoff=0)
    with pytest.raises(ValueError):
        pp.OneEuroParams(beta=-1)


def test_pipeline_order_and_flags():
    rng = np.random.default_rng(3)
    m = motion(rng.normal(size=(30, 9)) * 5)
    assert pp.smooth_pipeline(m).positions.tolist() == m.positions.tolist()
    h = pp.smooth_pipeline(m, hip_joint=0)
    assert not h.joints3()[:, 0].any()
    euro = pp.OneEuroParams()
    full = pp.smooth_pipeline(m, hip_joint=1, window=5, euro=euro)
    manual = pp.moving_average(pp.one_euro(hip_center(m, 1), euro), 5)
    np.testing.assert_array_equal(full.positions, manual.positions)
    assert full.n_frames == m.n_frames and full.joint_names == m.joint_names
