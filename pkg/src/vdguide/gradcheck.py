"""Finite-difference verification of the analytic loss and guidance gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import DepthMap, Intrinsics, Pose, normals_from_depth
from .guide import NoiseSchedule, predict_clean, scale_loss_grad
from .losses import (TERMS, TrackSet, depth_reprojection_loss, normal_loss, reprojection_warps,
                     smoothness_loss, tracking_loss)

CHECKS = TERMS + ("scale_guidance",)


@dataclass
class CheckResult:
    term: str
    max_rel: float
    median_rel: float
    compared: int
    passed: bool

    def to_dict(self):
        return {"term": self.term, "max_rel_error": self.max_rel, "median_rel_error": self.median_rel,
                "compared": self.compared, "passed": self.passed}


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-9) -> np.ndarray:
    """|a - f| / max(|a|, |f|), skipping entries where both are negligible."""
    a = analytic.reshape(-1)
    f = numeric.reshape(-1)
    scale = max(np.max(np.abs(a)), np.max(np.abs(f)), 1e-300)
    den = np.maximum(np.abs(a), np.abs(f))
    keep = den > floor * scale
    return np.abs(a - f)[keep] / den[keep]


def central_difference(fun, x: np.ndarray, h: float) -> np.ndarray:
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fun(x)
        flat[i] = old - h
        fm = fun(x)
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return g


@dataclass
class Instance:
    depth: np.ndarray
    poses: list[Pose]
    K: Intrinsics
    tracks: TrackSet
    normals: np.ndarray
    images: np.ndarray


def random_instance(seed: int, frames: int = 3, size: int = 16, n_tracks: int = 10) -> Instance:
    """Smooth random depths in 1.5-6 m with small camera motion."""
    rng = np.random.default_rng(seed)
    H = W = size
    v, u = np.mgrid[0:H, 0:W] / size
    base = rng.uniform(2.0, 4.0) + rng.uniform(-1, 1) * u + rng.uniform(-1, 1) * v
    depth = np.stack([base + 0.3 * np.sin(3 * u + rng.uniform(0, 6)) * np.cos(2 * v)
                      + 0.05 * rng.standard_normal((H, W)) for _ in range(frames)])
    depth = np.clip(depth, 1.5, 6.0)
    K = Intrinsics.from_image_size(W, H)
    poses = [Pose.identity()] + [Pose.from_rotvec(rng.normal(0, 0.02, 3), rng.normal(0, 0.05, 3))
                                 for _ in range(frames - 1)]
    fa = np.repeat(np.arange(frames - 1), n_tracks)
    k = len(fa)
    tracks = TrackSet(fa, fa + 1, rng.uniform(1, W - 2, (k, 2)), rng.uniform(1, W - 2, (k, 2)),
                      rng.uniform(0.2, 1.0, k))
    ref = np.stack([normals_from_depth(DepthMap(d + 0.1 * rng.standard_normal(d.shape), None), K).vectors
                    for d in depth])
    ref = ref / np.maximum(np.linalg.norm(ref, axis=-1, keepdims=True), 1e-12)
    images = rng.uniform(0, 1, (frames, H, W))
    return Instance(depth, poses, K, tracks, ref, images)


def _term_fns(inst: Instance, term: str):
    if term == "depth":
        warps = reprojection_warps(inst.depth, inst.poses, inst.K)
        return lambda d: depth_reprojection_loss(d, inst.poses, inst.K, warps=warps)
    if term == "tracking":
        return lambda d: tracking_loss(d, inst.poses, inst.tracks, inst.K)
    if term == "normal":
        return lambda d: normal_loss(d, inst.normals, inst.K)
    if term == "smoothness":
        return lambda d: smoothness_loss(d, inst.images)
    raise KeyError(term)


def check_term(term: str, seed: int = 0, h: float = 1e-6, break_sign: bool = False):
    """Relative errors between analytic and numeric gradients for one instance.

    The step is kept near the smoothed-abs epsilon: larger steps straddle the
    kink of residuals close to zero and report spurious errors.
    """
    if term == "scale_guidance":
        return check_scale_guidance(seed, h, break_sign)
    inst = random_instance(seed)
    fn = _term_fns(inst, term)
    _, g = fn(inst.depth)
    if break_sign:
        g = -g
    num = central_difference(lambda d: fn(d)[0], inst.depth.copy(), h)
    return relative_errors(g, num)


def check_scale_guidance(seed: int = 0, h: float = 1e-6, break_sign: bool = False, shape=(3, 16, 16)):
    rng = np.random.default_rng(seed)
    sched = NoiseSchedule.geometric()
    step = 2
    z_t = rng.standard_normal(shape)
    eps = rng.standard_normal(shape)
    z_al = rng.standard_normal(shape)
    _, g = scale_loss_grad(z_t, eps, z_al, sched, step)
    if break_sign:
        g = -g

    def loss(z):
        r = predict_clean(z, eps, sched, step) - z_al
        return float(np.mean(r * r))

    num = central_difference(loss, z_t.copy(), h)
    return relative_errors(g, num)


def run_suite(seeds=(0,), terms=CHECKS, max_tol: float = 1e-3, median_tol: float = 1e-4,
              break_term: str | None = None) -> list[CheckResult]:
    out = []
    for term in terms:
        errs = np.concatenate([check_term(term, s, break_sign=(term == break_term)) for s in seeds])
        mx = float(errs.max()) if errs.size else 0.0
        md = float(np.median(errs)) if errs.size else 0.0
        out.append(CheckResult(term, mx, md, int(errs.size), errs.size > 0 and mx < max_tol and md < median_tol))
    return out
