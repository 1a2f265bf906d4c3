import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vdguide.errors import EmptyEvaluationError, InvalidInputError
from vdguide.geom import DepthSequence, Intrinsics, Pose
from vdguide.metrics import absrel_delta1, absrel_per_window, mfc, trajectory_metrics
from vdguide.pipeline import plan_windows
from vdguide.pose import Trajectory

K = Intrinsics.from_image_size(16, 12)


def const(v, shape=(2, 4, 4)):
    return DepthSequence(np.full(shape, float(v)))


def test_identical_prediction():
    g = DepthSequence(np.random.default_rng(0).uniform(1, 5, (3, 4, 4)))
    m = absrel_delta1(g, g)
    assert m.absrel == 0.0 and m.delta1 == 1.0


def test_uniform_overestimate():
    m = absrel_delta1(const(1.5), const(1.0))
    assert abs(m.absrel - 0.5) < 1e-15 and m.delta1 == 0.0


def test_delta1_half_crossing():
    gt = const(1.0, (1, 2, 2))
    pred = DepthSequence(np.array([[[1.2, 1.3], [1.2, 1.3]]]))
    assert absrel_delta1(pred, gt).delta1 == 0.5


def test_delta1_threshold_is_strict():
    assert absrel_delta1(const(1.25), const(1.0)).delta1 == 0.0


def test_nonpositive_prediction_counted():
    pred = DepthSequence(np.array([[[1.0, -1.0]]]))
    m = absrel_delta1(pred, DepthSequence(np.array([[[1.0, 1.0]]])))
    assert m.nonpositive_count == 1 and m.delta1 == 0.5 and m.absrel == 0.0


def test_shape_mismatch_and_empty():
    with pytest.raises(InvalidInputError):
        absrel_delta1(const(1, (1, 2, 2)), const(1, (1, 2, 3)))
    empty = DepthSequence(np.ones((1, 2, 2)), np.zeros((1, 2, 2), bool))
    with pytest.raises(EmptyEvaluationError):
        absrel_delta1(empty, const(1, (1, 2, 2)))


@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_scale_invariance(c, seed):
    rng = np.random.default_rng(seed)
    g = rng.uniform(1, 5, (2, 3, 3))
    p = g * rng.uniform(0.7, 1.4, g.shape)
    a = absrel_delta1(DepthSequence(p), DepthSequence(g))
    b = absrel_delta1(DepthSequence(c * p), DepthSequence(c * g))
    assert abs(a.absrel - b.absrel) < 1e-12 and a.delta1 == b.delta1


def test_per_window_pools_each_window():
    gt = DepthSequence(np.random.default_rng(0).uniform(2, 5, (20, 3, 3)))
    plan = plan_windows(20, 12, 4)
    preds = [DepthSequence(1.5 * gt.values[a:b] + 0.2) for a, b in plan.windows]
    m = absrel_per_window(preds, gt, plan)
    assert m.absrel < 1e-12
    assert m.valid_pixel_count == sum(b - a for a, b in plan.windows) * 9


def _static(T=3):
    return [Pose.identity()] * T


def test_mfc_consistent_static_zero():
    frame = np.random.default_rng(1).uniform(2, 5, (12, 16))
    assert mfc(DepthSequence(np.stack([frame] * 3)), _static(), K) == 0.0


def test_mfc_scaled_frame():
    d = np.stack([np.full((12, 16), 5.0), np.full((12, 16), 5.1)])
    assert abs(mfc(DepthSequence(d), _static(2), K) - 0.02) < 1e-12


def test_mfc_monotone_in_noise():
    rng = np.random.default_rng(2)
    frame = rng.uniform(2, 5, (12, 16))
    noise = rng.standard_normal((4, 12, 16))
    vals = [mfc(DepthSequence(frame + s * noise), _static(4), K) for s in (0.0, 0.01, 0.05, 0.1, 0.3)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_mfc_needs_one_pose_per_frame():
    with pytest.raises(InvalidInputError):
        mfc(const(2, (3, 12, 16)), _static(2), K)


def _traj(n=100, seed=0):
    rng = np.random.default_rng(seed)
    poses, p = [], Pose.identity()
    for _ in range(n):
        poses.append(p)
        p = p @ Pose.from_rotvec(rng.normal(0, 0.02, 3), rng.normal(0, 0.05, 3))
    return Trajectory(poses)


def test_identical_trajectories():
    t = _traj()
    m = trajectory_metrics(t, t)
    assert m.ate < 1e-12 and m.rpe_trans == 0.0 and m.rpe_rot == 0.0


@given(st.integers(0, 1000))
def test_ate_gauge_invariance(seed):
    rng = np.random.default_rng(seed)
    gt = _traj(30, seed)
    G = Pose.from_rotvec(rng.normal(0, 1, 3), rng.normal(0, 3, 3))
    moved = Trajectory([G @ p for p in gt.poses])
    m = trajectory_metrics(moved, gt)
    assert m.ate < 1e-9 and m.rpe_trans < 1e-9 and m.rpe_rot < 1e-6


def test_rpe_single_translated_pose():
    gt = _traj(100)
    poses = list(gt.poses)
    p = poses[50]
    poses[50] = Pose(p.rotation, p.translation + np.array([0.1, 0.0, 0.0]))
    m = trajectory_metrics(Trajectory(poses), gt)
    assert abs(m.rpe_trans - np.sqrt(2 * 0.1 ** 2 / 99)) < 1e-12


def test_rpe_rot_symmetric():
    a, b = _traj(40, 1), _traj(40, 2)
    assert abs(trajectory_metrics(a, b).rpe_rot - trajectory_metrics(b, a).rpe_rot) < 1e-9
