import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vdguide.align import (AffineParams, affine_residual, align_global, align_per_window, apply_affine,
                           fit_affine)
from vdguide.errors import DegenerateFitError
from vdguide.geom import DepthSequence
from vdguide.metrics import absrel_delta1
from vdguide.pipeline import plan_windows


def seq(vals):
    return DepthSequence(np.asarray(vals, dtype=float).reshape(-1, 1, 1) if np.ndim(vals) == 1
                         else np.asarray(vals, dtype=float))


def normal_equations(x, y):
    """Independent 2x2 least-squares solve."""
    n = len(x)
    A = np.array([[np.dot(x, x), x.sum()], [x.sum(), n]])
    b = np.array([np.dot(x, y), y.sum()])
    return np.linalg.solve(A, b)


def test_identity_fit():
    s = seq([1.0, 2.0, 5.0])
    p = fit_affine(s, s)
    assert abs(p.scale - 1) < 1e-12 and abs(p.shift) < 1e-12


def test_exact_affine_relation():
    p = fit_affine(seq([1.0, 2.0, 3.0]), seq([3.0, 5.0, 7.0]))
    assert abs(p.scale - 2) < 1e-12 and abs(p.shift - 1) < 1e-12


def test_noisy_fit_matches_normal_equations():
    rng = np.random.default_rng(0)
    x = rng.uniform(1, 5, 500)
    y = 1.7 * x - 0.3 + rng.normal(0, 0.1, 500)
    p = fit_affine(seq(x), seq(y))
    s, t = normal_equations(x, y)
    assert abs(p.scale - s) < 1e-9 and abs(p.shift - t) < 1e-9


def test_apply_affine_examples():
    s = seq([3.0])
    assert apply_affine(s, AffineParams(1.0, 0.0)).values.item() == 3.0
    assert apply_affine(s, AffineParams(2.0, 1.0)).values.item() == 7.0


def test_degenerate_source_raises():
    with pytest.raises(DegenerateFitError):
        fit_affine(seq([2.0, 2.0, 2.0]), seq([1.0, 2.0, 3.0]))


@given(st.floats(0.2, 5.0), st.floats(-2.0, 2.0), st.integers(0, 10_000))
def test_fit_then_apply_recovers_target(s, t, seed):
    x = np.random.default_rng(seed).uniform(1, 6, (3, 4, 5))
    src, tgt = DepthSequence(x), DepthSequence(s * x + t)
    p = fit_affine(src, tgt)
    np.testing.assert_allclose(apply_affine(src, p).values, tgt.values, atol=1e-9)
    assert affine_residual(src, tgt, p) < 1e-9


@given(st.integers(0, 10_000), st.sampled_from([(1e-3, 0), (-1e-3, 0), (0, 1e-3), (0, -1e-3)]))
def test_fit_is_global_minimum(seed, d):
    rng = np.random.default_rng(seed)
    x = rng.uniform(1, 6, 200)
    y = 0.8 * x + 0.5 + rng.normal(0, 0.3, 200)
    p = fit_affine(seq(x), seq(y))
    base = np.sum((p.scale * x + p.shift - y) ** 2)
    moved = np.sum(((p.scale + d[0]) * x + p.shift + d[1] - y) ** 2)
    assert moved >= base


def test_align_global_examples():
    gt = DepthSequence(np.random.default_rng(0).uniform(1, 5, (4, 6, 6)))
    out, p = align_global(gt, gt)
    assert abs(p.scale - 1) < 1e-12 and abs(p.shift) < 1e-12
    pred = DepthSequence(0.5 * gt.values - 0.2)
    out, p = align_global(pred, gt)
    assert abs(p.scale - 2.0) < 1e-9 and abs(p.shift - 0.4) < 1e-9
    np.testing.assert_allclose(out.values, gt.values, atol=1e-9)


@given(st.floats(0.1, 10.0), st.floats(-3.0, 3.0))
def test_align_global_inverts_any_affine(s, t):
    gt = DepthSequence(np.random.default_rng(5).uniform(1, 5, (3, 5, 5)))
    out, _ = align_global(DepthSequence(s * gt.values + t), gt)
    np.testing.assert_allclose(out.values, gt.values, atol=1e-9)


def _drifted(gt, plan, scales, shifts):
    vals = gt.values.copy()
    for (a, b), s, t in zip(plan.windows, scales, shifts):
        vals[a:b] = s * gt.values[a:b] + t
    return DepthSequence(vals)


def test_per_window_recovers_while_global_does_not():
    rng = np.random.default_rng(1)
    plan = plan_windows(28, 10, 1)
    # adjacent affines agree at depth 3, so shared frames are consistent with both windows
    scales, shifts = [1.0, 1.2, 0.9, 1.5], [0.0, -0.6, 0.3, -1.5]
    g = rng.uniform(2, 6, (28, 4, 4))
    for w in range(1, len(plan)):
        g[plan.windows[w][0]] = 3.0
    gt = DepthSequence(g)
    pred = _drifted(gt, plan, scales, shifts)
    pw = align_per_window(pred, gt, plan)
    np.testing.assert_allclose(pw.values, gt.values, atol=1e-9)
    glob, _ = align_global(pred, gt)
    assert np.max(np.abs(glob.values - gt.values)) > 1e-3


def test_global_leaves_residual_with_two_affines():
    gt = DepthSequence(np.random.default_rng(2).uniform(2, 6, (20, 3, 3)))
    plan = plan_windows(20, 10, 1)
    pred = _drifted(gt, plan, [1.0, 1.3, 1.3], [0.0, 0.2, 0.2])
    _, p = align_global(pred, gt)
    res = [affine_residual(pred.slice(a, b), gt.slice(a, b), p) for a, b in plan.windows]
    assert max(res) > 1e-3


def test_single_window_equals_global():
    rng = np.random.default_rng(3)
    gt = DepthSequence(rng.uniform(2, 6, (10, 3, 3)))
    pred = DepthSequence(1.3 * gt.values + rng.normal(0, 0.1, gt.shape))
    a = align_per_window(pred, gt, [(0, 10)])
    b, _ = align_global(pred, gt)
    np.testing.assert_allclose(a.values, b.values, atol=1e-12)


def test_identity_corruption_gives_unit_params():
    gt = DepthSequence(np.random.default_rng(4).uniform(2, 6, (20, 3, 3)))
    _, params = align_per_window(gt, gt, plan_windows(20, 10, 2), return_params=True)
    for p in params:
        assert abs(p.scale - 1) < 1e-12 and abs(p.shift) < 1e-12


@given(st.integers(0, 10_000))
def test_per_window_dominates_global(seed):
    rng = np.random.default_rng(seed)
    gt = DepthSequence(rng.uniform(1, 6, (24, 3, 3)))
    plan = plan_windows(24, 8, 2)
    scales = rng.uniform(0.7, 1.4, len(plan))
    pred = _drifted(gt, plan, scales, rng.uniform(-0.3, 0.3, len(plan)))
    pred = DepthSequence(pred.values + rng.normal(0, 0.05, gt.shape))
    pw = absrel_delta1(align_per_window(pred, gt, plan), gt).absrel
    gl = absrel_delta1(align_global(pred, gt)[0], gt).absrel
    # per-window fits minimise squared error per window, so compare on the fitted objective
    sq_pw = np.sum((align_per_window(pred, gt, plan).values - gt.values) ** 2)
    sq_gl = np.sum((align_global(pred, gt)[0].values - gt.values) ** 2)
    assert sq_pw <= sq_gl + 1e-12
    assert pw <= gl * 1.5 + 1e-12
