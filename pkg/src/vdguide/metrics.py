"""Depth accuracy (AbsRel, delta1), multi-frame consistency, and trajectory error metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .align import align_global, fit_affine
from .errors import EmptyEvaluationError, InsufficientDataError, InvalidInputError
from .geom import DepthMap, DepthSequence, Intrinsics, Pose, relative, rotation_angle, warp_depth
from .pose import Trajectory

DELTA1_THRESHOLD = 1.25


@dataclass
class DepthMetrics:
    absrel: float
    delta1: float
    valid_pixel_count: int
    nonpositive_count: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class PoseMetrics:
    ate: float
    rpe_trans: float
    rpe_rot: float

    def to_dict(self):
        return asdict(self)


def _pixels(pred, gt):
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch {pred.shape} vs {gt.shape}")
    m = pred.mask & gt.mask & (gt.values > 0)
    return pred.values[m], gt.values[m]


def _depth_metrics(p: np.ndarray, g: np.ndarray) -> DepthMetrics:
    if g.size == 0:
        raise EmptyEvaluationError("no jointly valid pixels")
    pos = p > 0
    absrel = float(np.mean(np.abs(p[pos] - g[pos]) / g[pos])) if pos.any() else float("nan")
    with np.errstate(divide="ignore"):
        ratio = np.maximum(p[pos] / g[pos], g[pos] / p[pos])
    delta1 = float(np.sum(ratio < DELTA1_THRESHOLD) / g.size)
    return DepthMetrics(absrel, delta1, int(pos.sum()), int((~pos).sum()))


def absrel_delta1(pred: DepthSequence, gt: DepthSequence) -> DepthMetrics:
    """AbsRel and delta1 of an already aligned prediction.

    Pixels where the prediction is not positive fail delta1 and are left
    out of AbsRel; their number is ``nonpositive_count``.
    """
    return _depth_metrics(*_pixels(pred, gt))


def absrel_per_window(window_preds: list[DepthSequence], gt: DepthSequence, windows) -> DepthMetrics:
    """Metrics with an independent least-squares alignment for each window.

    Each window's own prediction is aligned to its ground-truth frames and
    all windows' pixels are pooled, so a frame shared by two windows is
    counted once per window.
    """
    windows = list(windows.windows if hasattr(windows, "windows") else windows)
    if len(windows) != len(window_preds):
        raise InvalidInputError("one prediction per window is required")
    ps, gs = [], []
    for (a, b), wp in zip(windows, window_preds):
        g = gt.slice(a, b)
        prm = fit_affine(wp, g)
        aligned = DepthSequence(prm.scale * wp.values + prm.shift, wp.mask)
        p_, g_ = _pixels(aligned, g)
        ps.append(p_)
        gs.append(g_)
    return _depth_metrics(np.concatenate(ps), np.concatenate(gs))


def _poses(traj) -> list[Pose]:
    return list(traj.poses) if isinstance(traj, Trajectory) else list(traj)


def mfc(pred: DepthSequence, gt_poses, K: Intrinsics, gt: DepthSequence | None = None) -> float:
    """Mean relative disagreement between each frame and its warped successor.

    Frame i+1 is warped into frame i with the ground-truth relative pose and
    compared as |d_i - d_{i+1->i}| / d_i over valid pixels. When ``gt`` is
    given the prediction is first aligned to it with one shared affine.
    """
    poses = _poses(gt_poses)
    if len(poses) != pred.frame_count:
        raise InvalidInputError("one pose per frame is required")
    if gt is not None:
        pred, _ = align_global(pred, gt)
    vals = []
    for i in range(pred.frame_count - 1):
        src = DepthMap(pred.values[i], pred.mask[i] & (pred.values[i] > 0))
        tgt = DepthMap(pred.values[i + 1], pred.mask[i + 1] & (pred.values[i + 1] > 0))
        w = warp_depth(src, tgt, relative(poses[i], poses[i + 1]), K, to_source_frame=True)
        m = w.mask & src.mask
        if not m.any():
            continue
        vals.append(np.mean(np.abs(src.values[m] - w.values[m]) / src.values[m]))
    if not vals:
        raise EmptyEvaluationError("no adjacent pair has a valid overlap")
    return float(np.mean(vals))


def align_positions(pred: np.ndarray, gt: np.ndarray, with_scale: bool = False):
    """Closed-form (R, t, s) minimising |s R pred + t - gt|^2 (Umeyama)."""
    mp, mg = pred.mean(axis=0), gt.mean(axis=0)
    P, G = pred - mp, gt - mg
    U, S, Vt = np.linalg.svd(G.T @ P / len(pred))
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    s = float(np.trace(np.diag(S) @ D) / np.mean(np.sum(P * P, axis=1))) if with_scale else 1.0
    return R, mg - s * R @ mp, s


def trajectory_metrics(pred, gt, delta: int = 1, with_scale: bool = False) -> PoseMetrics:
    """ATE after rigid alignment and RPE over (i, i + delta) pairs.

    ATE in meters; RPE translation in meters and rotation in degrees, both
    as RMSE over pairs. ``with_scale`` switches ATE to similarity alignment.
    """
    P, G = _poses(pred), _poses(gt)
    if len(P) != len(G):
        raise InvalidInputError("trajectories cover different frame counts")
    if len(P) < 3:
        raise InsufficientDataError("ATE alignment needs at least 3 frames")
    pp = np.array([p.translation for p in P])
    gg = np.array([g.translation for g in G])
    R, t, s = align_positions(pp, gg, with_scale)
    diff = s * pp @ R.T + t - gg
    ate = float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))
    te, re = [], []
    for i in range(len(P) - delta):
        rel_g = G[i].inverse() @ G[i + delta]
        rel_p = P[i].inverse() @ P[i + delta]
        e = rel_g.inverse() @ rel_p
        te.append(np.dot(e.translation, e.translation))
        re.append(np.degrees(rotation_angle(e.rotation)) ** 2)
    return PoseMetrics(ate, float(np.sqrt(np.mean(te))), float(np.sqrt(np.mean(re))))
