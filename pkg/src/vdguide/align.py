"""Masked least-squares scale/shift alignment of depth sequences."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFitError, InvalidInputError
from .geom import DepthSequence

log = logging.getLogger(__name__)

MIN_SOURCE_VARIANCE = 1e-12


@dataclass(frozen=True)
class AffineParams:
    scale: float = 1.0
    shift: float = 0.0

    @property
    def negative_scale(self) -> bool:
        # a negative fitted scale means the prediction is inverted relative to
        # the reference; callers should surface it
        return self.scale < 0


def _as_arrays(x):
    if isinstance(x, DepthSequence):
        return x.values, x.mask
    a = np.asarray(x, dtype=np.float64)
    return a, np.ones(a.shape, dtype=bool)


def fit_affine(source, target, mask=None) -> AffineParams:
    """Minimise sum (s * source + t - target)^2 over jointly valid pixels.

    ``source`` and ``target`` may be DepthSequences or plain arrays; their own
    masks are intersected with ``mask`` when given.
    """
    src, m1 = _as_arrays(source)
    tgt, m2 = _as_arrays(target)
    if src.shape != tgt.shape:
        raise InvalidInputError(f"shape mismatch {src.shape} vs {tgt.shape}")
    m = m1 & m2 & np.isfinite(src) & np.isfinite(tgt)
    if mask is not None:
        m &= np.asarray(mask, dtype=bool)
    x = src[m]
    y = tgt[m]
    n = x.size
    if n < 2:
        raise DegenerateFitError(f"need at least 2 jointly valid pixels, got {n}")
    # centred normal equations; equivalent to the 2x2 system but better conditioned
    mx = x.mean()
    my = y.mean()
    dx = x - mx
    var = np.dot(dx, dx) / n
    if var < MIN_SOURCE_VARIANCE:
        raise DegenerateFitError(f"source variance {var:.3g} is below {MIN_SOURCE_VARIANCE}")
    s = np.dot(dx, y - my) / (n * var)
    t = my - s * mx
    p = AffineParams(float(s), float(t))
    if p.negative_scale:
        log.warning("fitted a negative scale (%.4g)", s)
    return p


def apply_affine(d, p: AffineParams):
    """s * d + t on valid pixels; invalid pixels and the mask are untouched."""
    if isinstance(d, DepthSequence):
        out = np.where(d.mask, p.scale * d.values + p.shift, d.values)
        return DepthSequence(out, d.mask.copy())
    return p.scale * np.asarray(d, dtype=np.float64) + p.shift


def affine_residual(source, target, p: AffineParams, mask=None) -> float:
    """Sum of squared residuals of ``p`` over jointly valid pixels."""
    src, m1 = _as_arrays(source)
    tgt, m2 = _as_arrays(target)
    m = m1 & m2
    if mask is not None:
        m &= mask
    r = p.scale * src[m] + p.shift - tgt[m]
    return float(np.dot(r, r))


def _to_space(seq: DepthSequence, space: str) -> DepthSequence:
    if space == "depth":
        return seq
    if space == "disparity":
        m = seq.mask & (seq.values > 0)
        vals = np.where(m, 1.0 / np.where(m, seq.values, 1.0), 0.0)
        return DepthSequence(vals, m)
    raise InvalidInputError(f"unknown alignment space {space!r}")


def _from_space(seq: DepthSequence, space: str) -> DepthSequence:
    if space == "depth":
        return seq
    m = seq.mask & (seq.values > 0)
    vals = np.where(m, 1.0 / np.where(m, seq.values, 1.0), 0.0)
    return DepthSequence(vals, m)


def align_global(pred: DepthSequence, gt: DepthSequence, space: str = "depth"):
    """One shared (scale, shift) over the whole video.

    Returns the aligned prediction and the fitted parameters. ``space`` =
    "disparity" fits on inverse depth and converts back.
    """
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p_s, g_s = _to_space(pred, space), _to_space(gt, space)
    params = fit_affine(p_s, g_s)
    return _from_space(apply_affine(p_s, params), space), params


def align_per_window(pred: DepthSequence, gt: DepthSequence, plan, space: str = "depth",
                     return_params: bool = False):
    """Independent fit per window of ``plan``.

    A frame covered by several windows uses the parameters of the earliest
    window containing it.
    """
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch {pred.shape} vs {gt.shape}")
    windows = list(plan.windows if hasattr(plan, "windows") else plan)
    T = pred.frame_count
    if not windows or windows[0][0] != 0 or max(e for _, e in windows) != T:
        raise InvalidInputError("plan does not cover the sequence")
    p_s, g_s = _to_space(pred, space), _to_space(gt, space)
    params = [fit_affine(p_s.slice(a, b), g_s.slice(a, b)) for a, b in windows]
    out = p_s.copy()
    assigned = np.zeros(T, dtype=bool)
    for (a, b), p in zip(windows, params):
        idx = np.arange(a, b)[~assigned[a:b]]
        out.values[idx] = np.where(p_s.mask[idx], p.scale * p_s.values[idx] + p.shift, p_s.values[idx])
        assigned[idx] = True
    out = _from_space(out, space)
    return (out, params) if return_params else out
