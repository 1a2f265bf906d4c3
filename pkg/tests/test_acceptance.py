"""Acceptance criteria 1-9 on the synthetic harness.

Each test records one line in ``conftest.ACCEPTANCE``; the terminal summary
prints them as PASS/FAIL after the run. The full suite takes about 7
minutes on one core, dominated by geometry guidance at 3-7 windows.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ACCEPTANCE
from vdguide.experiments import GEOMETRY_NOISE, NOISY, STANDARD, build, evaluate, length_for_windows, run
from vdguide.geom import Intrinsics, Pose, rotation_angle
from vdguide.gradcheck import random_instance, run_suite
from vdguide.guide import (GuidanceConfig, IdentityCodec, NoiseSchedule, OracleDenoiser, OverlapRef,
                           denoise_window, geometry_descent)
from vdguide.io import read_container, read_tum, write_container, write_tum
from vdguide.losses import GeometryContext, LossWeights
from vdguide.metrics import trajectory_metrics
from vdguide.pose import RansacConfig, derive_trajectory, solve_pnp_ransac
from vdguide.synth import SceneSpec, generate_scene

WINDOW_COUNTS = range(2, 8)
SCHED = NoiseSchedule.geometric()
UNGUIDED = GuidanceConfig(scale_strength=0.0, geometry_weights=LossWeights.zeros())

# Depth noise for the ablation-ordering scene. At 0.05 m every pixel stays
# within the delta1 threshold and the metric saturates; 0.7 m brings the
# baseline per-window delta1 to about 0.9 so the ordering is measurable.
ORDERING_NOISE = replace(NOISY, depth_noise_sigma=0.7)


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, detail


@pytest.fixture(scope="module")
def experiments():
    """Standard corrupted scene per window count (first frames shared across counts)."""
    return {n: build(length_for_windows(n), STANDARD) for n in WINDOW_COUNTS}


# -------------------------------------------------------------------------- 1
def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    res = run_suite(seeds=(0, 1, 2))
    dt = time.perf_counter() - t0
    worst = max(r.max_rel for r in res)
    median = max(r.median_rel for r in res)
    ok = all(r.passed for r in res) and dt < 60
    record(1, ok, f"max rel {worst:.2e} (<1e-3), worst median {median:.2e} (<1e-4), {dt:.1f} s (<60 s)")


# -------------------------------------------------------------------------- 2
_fp = {"worst": 0.0, "identical": True}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["identity", "fitted"]))
def _fixed_point_cases(seed, codec_kind):
    rng = np.random.default_rng(seed)
    depth = rng.uniform(0.5, 10.0, (int(rng.integers(2, 6)), 6, 7))
    codec = IdentityCodec() if codec_kind == "identity" else IdentityCodec.fit(depth)
    target = codec.encode(depth)
    init = rng.standard_normal(target.shape)
    den = OracleDenoiser(target, SCHED)
    a, d = denoise_window(init, den, codec, SCHED, UNGUIDED)
    _fp["worst"] = max(_fp["worst"], float(np.max(np.abs(d - depth))))
    zero = GuidanceConfig(scale_strength=0.0, geometry_weights=LossWeights.zeros(), guided_steps=(3, 2, 1))
    prev = OverlapRef(np.arange(1), rng.uniform(0, 1, (1,) + target.shape[1:]))
    b, _ = denoise_window(init, den, codec, SCHED, zero, prev=prev)
    _fp["identical"] &= bool(np.array_equal(a, b))


def test_criterion_2_oracle_fixed_point():
    _fixed_point_cases()
    ok = _fp["worst"] <= 1e-9 and _fp["identical"]
    record(2, ok, f"max |depth - target| {_fp['worst']:.1e} (<=1e-9), zero strength bit-identical: "
                  f"{_fp['identical']}")


# -------------------------------------------------------------------------- 3
def test_criterion_3_shared_alignment_drop(experiments):
    t0 = time.perf_counter()
    rows = {n: evaluate(exp, run(exp, "baseline")) for n, exp in experiments.items()}
    dt = time.perf_counter() - t0
    g2, g7 = rows[2]["absrel_global"], rows[7]["absrel_global"]
    pw = [rows[n]["absrel_perwindow"] for n in WINDOW_COUNTS]
    spread = (max(pw) - min(pw)) / min(pw)
    growth = g7 / g2 - 1.0
    ok = growth >= 0.5 and spread < 0.10 and dt < 300
    record(3, ok, f"global AbsRel 2w {g2:.4f} -> 7w {g7:.4f} (+{growth:.0%}, need >=50%), "
                  f"per-window spread {spread:.1%} (<10%), {dt:.0f} s")


# -------------------------------------------------------------------------- 4
def test_criterion_4_scale_guidance(experiments):
    reductions, monotone = {}, True
    for n, exp in experiments.items():
        base = evaluate(exp, run(exp, "baseline"))["absrel_global"]
        res = run(exp, "scale-only")
        reductions[n] = 1.0 - evaluate(exp, res)["absrel_global"] / base
        for glog in res.logs[1:]:
            r = glog.overlap_residuals
            monotone &= [x["step"] for x in r] == [2, 1]
            monotone &= all(x["after"] <= x["before"] for x in r)
            monotone &= r[1]["after"] <= r[0]["after"] + 1e-12
    worst = min(reductions.values())
    ok = worst >= 0.5 and monotone
    record(4, ok, f"scale-only AbsRel reduction min {worst:.1%} over 2-7 windows (>=50%), "
                  f"overlap residual monotone: {monotone}")


# -------------------------------------------------------------------------- 5
def test_criterion_5_geometry_guidance():
    exp = build(length_for_windows(2), GEOMETRY_NOISE)
    base = evaluate(exp, run(exp, "baseline"))["mfc"]
    geo = evaluate(exp, run(exp, "geometry-only"))["mfc"]
    red = 1.0 - geo / base
    increases = 0
    for seed in range(100):
        inst = random_instance(seed)
        ctx = GeometryContext(K=inst.K, poses=inst.poses, tracks=inst.tracks, normals=inst.normals,
                              images=inst.images)
        losses = geometry_descent(inst.depth, ctx, LossWeights()).losses
        increases += any(b > a for a, b in zip(losses, losses[1:]))
    ok = red >= 0.25 and increases == 0
    record(5, ok, f"MFC baseline {base:.5f} -> geometry-only {geo:.5f} ({red:.1%} lower, need >=25%), "
                  f"instances with a loss increase: {increases}/100")


# -------------------------------------------------------------------------- 6
ORDER_ROWS = ("baseline", "scale-only", "geometry-only", "post-scale", "post-geometry", "post-opt", "full")


def test_criterion_6_ablation_ordering():
    exp = build(length_for_windows(2), ORDERING_NOISE)
    d1 = {name: evaluate(exp, run(exp, name))["delta1_global"] for name in ORDER_ROWS}
    for name in ORDER_ROWS:
        print(f"  {name:14s} delta1 {d1[name]:.5f}")
    singles = ("scale-only", "geometry-only")
    ok = (all(d1["baseline"] < d1[s] for s in singles)
          and all(d1[s] < d1["post-opt"] for s in singles)
          and d1["post-opt"] <= d1["full"]
          and d1["full"] == max(d1.values()))
    record(6, ok, "delta1 " + ", ".join(f"{k} {v:.4f}" for k, v in d1.items()))


# -------------------------------------------------------------------------- 7
def test_criterion_7_pose_derivation():
    lines, ok = [], True
    for n in WINDOW_COUNTS:
        exp = build(length_for_windows(n), NOISY)
        b = evaluate(exp, run(exp, "baseline"), poses=True)
        f = evaluate(exp, run(exp, "full"), poses=True)
        better = f["ate"] < b["ate"] and f["rpe_trans"] < b["rpe_trans"]
        ok &= better
        lines.append(f"{n}w ATE {b['ate']:.4f}->{f['ate']:.4f} RPE {b['rpe_trans']:.4f}->{f['rpe_trans']:.4f}")
        print("  " + lines[-1])
    scene = generate_scene(SceneSpec(frame_count=length_for_windows(2)))
    traj = derive_trajectory(scene.gt_depth, scene.gt_tracks, scene.K)
    gt = trajectory_metrics(traj, scene.gt_poses)
    ok &= gt.ate < 1e-6 and gt.rpe_rot < 1e-4
    record(7, ok, "; ".join(lines) + f"; exact depth ATE {gt.ate:.1e} m, RPE rot {gt.rpe_rot:.1e} deg")


# -------------------------------------------------------------------------- 8
def test_criterion_8_pnp_robustness():
    K = Intrinsics(400.0, 400.0, 320.0, 240.0)
    good = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        pose = Pose.from_rotvec(rng.normal(0, 0.2, 3), rng.normal(0, 0.3, 3))
        n = 200
        Xc = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-1.5, 1.5, n), rng.uniform(3, 8, n)])
        Xw = pose.inverse().apply(Xc)
        x = np.column_stack([K.fx * Xc[:, 0] / Xc[:, 2] + K.cx, K.fy * Xc[:, 1] / Xc[:, 2] + K.cy])
        x += rng.normal(0, 0.5, x.shape)
        idx = rng.choice(n, 60, replace=False)
        x[idx] = np.column_stack([rng.uniform(0, 640, 60), rng.uniform(0, 480, 60)])
        try:
            est, _ = solve_pnp_ransac(Xw, x, K, RansacConfig(seed=seed))
        except Exception:
            continue
        rot = np.degrees(rotation_angle(pose.rotation.T @ est.rotation))
        trans = np.linalg.norm(pose.translation - est.translation)
        good += rot < 0.1 and trans < 1e-2
    record(8, good >= 95, f"{good}/100 trials within 0.1 deg / 1e-2 m (need >=95)")


# -------------------------------------------------------------------------- 9
def test_criterion_9_determinism_and_round_trips(tmp_path):
    def once():
        exp = build(length_for_windows(2), NOISY)
        return run(exp, "full").depth.values.tobytes()

    same_run = once() == once()
    rng = np.random.default_rng(9)
    vals = rng.standard_normal((3, 5, 4)).astype(np.float32)
    mask = rng.uniform(size=vals.shape) > 0.3
    write_container(tmp_path / "d.dsyn", vals, mask)
    v, m, _ = read_container(tmp_path / "d.dsyn")
    dsyn = v.tobytes() == vals.tobytes() and np.array_equal(m, mask)
    ts = np.arange(6, dtype=float)
    t = rng.standard_normal((6, 3))
    q = rng.standard_normal((6, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    write_tum(tmp_path / "p.txt", ts, t, q)
    ts2, t2, q2 = read_tum(tmp_path / "p.txt")
    tum = ts2.tobytes() == ts.tobytes() and t2.tobytes() == t.tobytes() and q2.tobytes() == q.tobytes()
    record(9, same_run and dsyn and tum, f"repeated full run byte-identical: {same_run}, "
                                         f"DSYN round trip exact: {dsyn}, TUM round trip exact: {tum}")
