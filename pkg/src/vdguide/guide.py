"""Diffusion-style denoising harness with scale (forward) and geometry (backward) guidance.

Steps are numbered t = T..1 as in DDIM; ``NoiseSchedule.alpha(t)`` is the
cumulative signal level at step t and alpha(0) = 1. A latent window is a
(T_w, h, w) array; codecs map depth windows to latents and back.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

from .align import fit_affine
from .errors import DegenerateFitError, InvalidConfigError
from .geom import DepthSequence
from .losses import GeometryContext, LossWeights, total_geometry_loss

log = logging.getLogger(__name__)

ORDERS = ("geometry_then_scale", "scale_then_geometry")


# ------------------------------------------------------------------ schedule

@dataclass(frozen=True)
class NoiseSchedule:
    """alpha_bar[k] is the signal level of step k + 1; strictly decreasing."""

    alpha_bar: tuple[float, ...]

    def __post_init__(self):
        a = np.asarray(self.alpha_bar, dtype=np.float64)
        if a.ndim != 1 or len(a) < 1:
            raise InvalidConfigError("schedule needs at least one step")
        if np.any(a <= 0) or np.any(a >= 1):
            raise InvalidConfigError("alpha_bar values must lie in (0, 1)")
        if np.any(np.diff(a) >= 0):
            raise InvalidConfigError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "alpha_bar", tuple(float(x) for x in a))

    @classmethod
    def geometric(cls, steps: int = 5, first: float = 0.99, last: float = 0.01) -> "NoiseSchedule":
        if steps == 1:
            return cls((first,))
        return cls(tuple(np.geomspace(first, last, steps)))

    @property
    def steps(self) -> int:
        return len(self.alpha_bar)

    def alpha(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.steps:
            raise InvalidConfigError(f"step {t} outside 1..{self.steps}")
        return self.alpha_bar[t - 1]

    def timesteps(self) -> list[int]:
        return list(range(self.steps, 0, -1))


def predict_clean(z_t: np.ndarray, eps: np.ndarray, schedule: NoiseSchedule, step: int) -> np.ndarray:
    a = schedule.alpha(step)
    return (z_t - np.sqrt(1.0 - a) * eps) / np.sqrt(a)


def eps_from_clean(z_t: np.ndarray, z0: np.ndarray, schedule: NoiseSchedule, step: int) -> np.ndarray:
    """Invert ``predict_clean`` for the noise that yields ``z0``."""
    a = schedule.alpha(step)
    return (z_t - np.sqrt(a) * z0) / np.sqrt(1.0 - a)


def ddim_step(z0: np.ndarray, eps: np.ndarray, schedule: NoiseSchedule, step: int) -> np.ndarray:
    """Deterministic (eta = 0) update to step - 1."""
    a_prev = schedule.alpha(step - 1)
    return np.sqrt(a_prev) * z0 + np.sqrt(1.0 - a_prev) * eps


# -------------------------------------------------------------------- denoisers

class Denoiser(Protocol):
    def __call__(self, z_t: np.ndarray, step: int, cond: dict | None = None) -> np.ndarray: ...


class OracleDenoiser:
    """Noise prediction whose predicted clean sample is always ``target``."""

    def __init__(self, target: np.ndarray, schedule: NoiseSchedule):
        self.target = np.asarray(target, dtype=np.float64)
        self.schedule = schedule
        self.calls = 0

    def __call__(self, z_t, step, cond=None):
        self.calls += 1
        return eps_from_clean(z_t, self.target, self.schedule, step)


class VideoOracleDenoiser:
    """Per-window oracle targets, selected by ``cond["window"]``."""

    def __init__(self, window_targets: list[np.ndarray], schedule: NoiseSchedule):
        self.targets = [np.asarray(t, dtype=np.float64) for t in window_targets]
        self.schedule = schedule
        self.calls = 0

    def __call__(self, z_t, step, cond=None):
        self.calls += 1
        w = 0 if cond is None else cond.get("window", 0)
        return eps_from_clean(z_t, self.targets[w], self.schedule, step)


# ----------------------------------------------------------------------- codecs

class LatentCodec(Protocol):
    def encode(self, depth: np.ndarray) -> np.ndarray: ...

    def decode(self, latent: np.ndarray) -> np.ndarray: ...


@dataclass
class IdentityCodec:
    """latent = (depth - lo) / (hi - lo), with one normalisation per run.

    A shared range keeps latents of different windows comparable, which the
    overlap blending in latent space relies on.
    """

    lo: float = 0.0
    hi: float = 1.0

    @classmethod
    def fit(cls, depth: np.ndarray, mask: np.ndarray | None = None) -> "IdentityCodec":
        v = np.asarray(depth)[mask] if mask is not None else np.asarray(depth)
        lo, hi = float(np.min(v)), float(np.max(v))
        if hi <= lo:
            hi = lo + 1.0
        return cls(lo, hi)

    def encode(self, depth):
        return (np.asarray(depth, dtype=np.float64) - self.lo) / (self.hi - self.lo)

    def decode(self, latent):
        return np.asarray(latent, dtype=np.float64) * (self.hi - self.lo) + self.lo

    def latent_shape(self, shape):
        return tuple(shape)


@dataclass
class StridedCodec:
    """Normalised depth averaged over 2x2 blocks; bilinear upsampling on decode."""

    lo: float = 0.0
    hi: float = 1.0

    @classmethod
    def fit(cls, depth, mask=None) -> "StridedCodec":
        c = IdentityCodec.fit(depth, mask)
        return cls(c.lo, c.hi)

    def latent_shape(self, shape):
        T, H, W = shape
        if H % 2 or W % 2:
            raise InvalidConfigError("strided codec needs even image dimensions")
        return (T, H // 2, W // 2)

    def encode(self, depth):
        d = (np.asarray(depth, dtype=np.float64) - self.lo) / (self.hi - self.lo)
        T, H, W = d.shape
        self.latent_shape(d.shape)
        return d.reshape(T, H // 2, 2, W // 2, 2).mean(axis=(2, 4))

    def decode(self, latent):
        z = np.asarray(latent, dtype=np.float64)
        T, h, w = z.shape
        # a latent cell centre sits at full-resolution coordinate 2i + 0.5
        def interp(n):
            x = (np.arange(2 * n) - 0.5) / 2.0
            x = np.clip(x, 0, n - 1)
            i0 = np.minimum(np.floor(x).astype(int), max(n - 2, 0))
            f = x - i0
            i1 = np.minimum(i0 + 1, n - 1)
            return i0, i1, f
        r0, r1, fr = interp(h)
        c0, c1, fc = interp(w)
        rows = z[:, r0] * (1 - fr)[None, :, None] + z[:, r1] * fr[None, :, None]
        out = rows[:, :, c0] * (1 - fc) + rows[:, :, c1] * fc
        return out * (self.hi - self.lo) + self.lo


# ----------------------------------------------------------------------- config

@dataclass(frozen=True)
class GuidanceConfig:
    """Which guidance runs when, and how strongly.

    ``scale_strength`` is either one value for every guided step or a
    mapping step -> s(t). In "relative" mode the strength is the fraction
    of the gap between the predicted clean latent and its pseudo-label
    that one step closes (1.0 closes it); "absolute" uses s(t) as the raw
    multiplier of the latent gradient.
    """

    scale_strength: float | tuple[tuple[int, float], ...] = 1.0
    scale_strength_mode: str = "relative"
    geometry_weights: LossWeights = field(default_factory=LossWeights)
    inner_steps: int = 30
    inner_step_size: float = 1e-2
    guided_steps: tuple[int, ...] = (2, 1)
    scale_steps: tuple[int, ...] | None = None
    geometry_steps: tuple[int, ...] | None = None
    order: str = "geometry_then_scale"
    pose_source: str = "pnp"
    max_halvings: int = 20

    def __post_init__(self):
        if self.order not in ORDERS:
            raise InvalidConfigError(f"unknown order {self.order!r}")
        if self.scale_strength_mode not in ("relative", "absolute"):
            raise InvalidConfigError("scale_strength_mode is 'relative' or 'absolute'")
        if self.pose_source not in ("pnp", "gt"):
            raise InvalidConfigError("pose_source is 'pnp' or 'gt'")
        if self.geometry_enabled and self.inner_steps < 1:
            raise InvalidConfigError("inner_steps must be >= 1 with geometry guidance")
        if self.inner_step_size <= 0:
            raise InvalidConfigError("inner_step_size must be positive")

    def strength(self, step: int) -> float:
        s = self.scale_strength
        if isinstance(s, (int, float)):
            return float(s)
        return float(dict(s).get(step, 0.0))

    @property
    def scale_enabled(self) -> bool:
        s = self.scale_strength
        vals = [s] if isinstance(s, (int, float)) else [v for _, v in s]
        return any(v != 0 for v in vals) and bool(self.active_scale_steps)

    @property
    def geometry_enabled(self) -> bool:
        w = self.geometry_weights
        return any(v > 0 for v in w.as_dict().values()) and bool(self.active_geometry_steps)

    @property
    def active_scale_steps(self) -> tuple[int, ...]:
        return self.guided_steps if self.scale_steps is None else self.scale_steps

    @property
    def active_geometry_steps(self) -> tuple[int, ...]:
        return self.guided_steps if self.geometry_steps is None else self.geometry_steps

    def validate(self, schedule: NoiseSchedule):
        steps = set(range(1, schedule.steps + 1))
        for s in (self.guided_steps, self.active_scale_steps, self.active_geometry_steps):
            if not set(s) <= steps:
                raise InvalidConfigError(f"guided steps {sorted(s)} not within 1..{schedule.steps}")

    def with_(self, **kw) -> "GuidanceConfig":
        return replace(self, **kw)


@dataclass
class GuidanceLog:
    """Per-window record of every guidance call."""

    window: int = 0
    scale_calls: int = 0
    geometry_calls: int = 0
    scale_fits: list[dict] = field(default_factory=list)
    overlap_residuals: list[dict] = field(default_factory=list)
    loss_curves: list[dict] = field(default_factory=list)
    warnings: list[dict] = field(default_factory=list)

    def warn(self, step: int, message: str):
        log.warning("window %d step %d: %s", self.window, step, message)
        self.warnings.append({"window": self.window, "step": step, "message": message})

    def to_dict(self) -> dict:
        return {
            "window": self.window,
            "scale_calls": self.scale_calls,
            "geometry_calls": self.geometry_calls,
            "scale_fits": self.scale_fits,
            "overlap_residuals": self.overlap_residuals,
            "loss_curves": self.loss_curves,
            "warnings": self.warnings,
        }


# ---------------------------------------------------------------- scale guidance

@dataclass
class OverlapRef:
    """Previous window's denoised latent restricted to the shared frames.

    ``cur_frames`` indexes the current window, ``latent`` holds the previous
    window's values for those frames.
    """

    cur_frames: np.ndarray
    latent: np.ndarray


def overlap_rms(cur_depth: np.ndarray, prev_depth: np.ndarray) -> float:
    r = cur_depth - prev_depth
    return float(np.sqrt(np.mean(r * r)))


def scale_pseudo_label(z0: np.ndarray, ref: OverlapRef, codec: LatentCodec):
    """Aligned latent and the affine fitted on the overlap frames."""
    d_cur = codec.decode(z0)
    d_prev = codec.decode(ref.latent)
    p = fit_affine(d_cur[ref.cur_frames], d_prev)
    z_aligned = codec.encode(p.scale * d_cur + p.shift)
    return z_aligned, p


def scale_loss_grad(z_t, eps, z_aligned, schedule, step):
    """L = mean (z0 - z_aligned)^2 with z_aligned constant; gradient w.r.t. z_t."""
    a = schedule.alpha(step)
    z0 = predict_clean(z_t, eps, schedule, step)
    r = z0 - z_aligned
    n = r.size
    return float(np.mean(r * r)), 2.0 * r / (n * np.sqrt(a))


def raw_strength(cfg: GuidanceConfig, schedule: NoiseSchedule, step: int, n: int) -> float:
    s = cfg.strength(step)
    if cfg.scale_strength_mode == "absolute":
        return s
    a = schedule.alpha(step)
    return s * n * a / (2.0 * np.sqrt(1.0 - a))


def forward_scale_guidance(z_t, eps, ref: OverlapRef | None, schedule: NoiseSchedule, step: int,
                           strength: float, codec: LatentCodec, glog: GuidanceLog | None = None):
    """eps + strength * grad_{z_t} L_scale, or eps unchanged when guidance is skipped.

    ``strength`` is the raw multiplier s(t).
    """
    if glog is not None:
        glog.scale_calls += 1
    if ref is None or len(ref.cur_frames) == 0 or strength == 0:
        return eps
    z0 = predict_clean(z_t, eps, schedule, step)
    try:
        z_al, p = scale_pseudo_label(z0, ref, codec)
    except DegenerateFitError as exc:
        if glog is not None:
            glog.warn(step, f"scale guidance skipped: {exc}")
        return eps
    loss, g = scale_loss_grad(z_t, eps, z_al, schedule, step)
    new_eps = eps + strength * g
    if glog is not None:
        d_prev = codec.decode(ref.latent)
        before = overlap_rms(codec.decode(z0)[ref.cur_frames], d_prev)
        after_z0 = predict_clean(z_t, new_eps, schedule, step)
        after = overlap_rms(codec.decode(after_z0)[ref.cur_frames], d_prev)
        glog.scale_fits.append({"step": step, "scale": p.scale, "shift": p.shift, "loss": loss})
        glog.overlap_residuals.append({"step": step, "before": before, "after": after})
        if p.negative_scale:
            glog.warn(step, f"negative overlap scale {p.scale:.4g}")
    return new_eps


# ------------------------------------------------------------- geometry guidance

@dataclass
class DescentResult:
    depth: np.ndarray
    losses: list[float]
    step_sizes: list[float]
    aborted: bool = False


def _rms(g, mask):
    v = g[mask] if mask is not None else g
    return float(np.sqrt(np.mean(v * v))) if v.size else 0.0


def geometry_descent(depth: np.ndarray, ctx: GeometryContext, weights: LossWeights,
                     steps: int = 30, step_size: float = 1e-2, max_halvings: int = 20,
                     mask: np.ndarray | None = None) -> DescentResult:
    """Safeguarded gradient descent on the total geometry loss in depth space.

    Each step moves along -g / rms(g) by ``step_size`` meters (RMS over valid
    pixels). A step that raises the loss is retried at half the size; a
    step is never accepted unless the loss does not increase, so the loss
    curve is non-increasing.
    """
    d = np.array(depth, dtype=np.float64, copy=True)
    m = np.ones(d.shape, dtype=bool) if mask is None else mask
    if ctx.mask is not None:
        m = m & ctx.mask
    rep = total_geometry_loss(d, ctx, weights)
    if not np.isfinite(rep.total) or not np.all(np.isfinite(rep.gradient[m])):
        return DescentResult(d, [rep.total], [], aborted=True)
    losses, sizes = [rep.total], []
    eta = step_size
    for _ in range(steps):
        g = np.where(m, rep.gradient, 0.0)
        rms = _rms(g, m)
        if rms == 0:
            break
        direction = g / rms
        accepted = False
        for _ in range(max_halvings + 1):
            cand = d - eta * direction
            if np.any(cand[m] <= 0):
                eta *= 0.5
                continue
            new = total_geometry_loss(cand, ctx, weights)
            if not np.isfinite(new.total) or not np.all(np.isfinite(new.gradient[m])):
                return DescentResult(d, losses, sizes, aborted=True)
            if new.total <= rep.total:
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            break
        d, rep = cand, new
        losses.append(rep.total)
        sizes.append(eta)
    return DescentResult(d, losses, sizes)


def backward_geometry_guidance(z_t, eps, schedule: NoiseSchedule, step: int, ctx: GeometryContext,
                               cfg: GuidanceConfig, codec: LatentCodec,
                               glog: GuidanceLog | None = None):
    """Optimise the decoded clean sample on the geometry losses and re-derive eps."""
    if glog is not None:
        glog.geometry_calls += 1
    if not cfg.geometry_enabled:
        return eps
    z0 = predict_clean(z_t, eps, schedule, step)
    d0 = codec.decode(z0)
    res = geometry_descent(d0, ctx, cfg.geometry_weights, cfg.inner_steps, cfg.inner_step_size,
                           cfg.max_halvings)
    if glog is not None:
        glog.loss_curves.append({"step": step, "losses": res.losses, "step_sizes": res.step_sizes})
        if res.aborted:
            glog.warn(step, "non-finite geometry loss; kept last finite iterate")
    if len(res.losses) < 2:
        return eps
    dz = codec.encode(res.depth) - codec.encode(d0)
    return eps_from_clean(z_t, z0 + dz, schedule, step)


# ----------------------------------------------------------------- denoise loop

def denoise_window(initial: np.ndarray, denoiser, codec: LatentCodec, schedule: NoiseSchedule,
                   cfg: GuidanceConfig, prev: OverlapRef | None = None,
                   ctx: GeometryContext | None = None, cond: dict | None = None,
                   glog: GuidanceLog | None = None, context_hook=None):
    """Run the step loop for one window; returns (final latent, decoded depth).

    ``context_hook``, when given, is called with the first decoded clean
    sample that reaches geometry guidance and must return the
    GeometryContext to use for the rest of the window.
    """
    cfg.validate(schedule)
    glog = glog if glog is not None else GuidanceLog()
    z = np.array(initial, dtype=np.float64, copy=True)
    z0 = z
    for t in schedule.timesteps():
        eps = denoiser(z, t, cond)
        do_scale = cfg.scale_enabled and t in cfg.active_scale_steps and prev is not None
        do_geom = cfg.geometry_enabled and t in cfg.active_geometry_steps
        stages = ["geometry", "scale"] if cfg.order == "geometry_then_scale" else ["scale", "geometry"]
        for stage in stages:
            if stage == "geometry" and do_geom:
                if ctx is None and context_hook is not None:
                    ctx = context_hook(codec.decode(predict_clean(z, eps, schedule, t)))
                if ctx is None:
                    glog.warn(t, "geometry guidance skipped: no context")
                    continue
                try:
                    eps = backward_geometry_guidance(z, eps, schedule, t, ctx, cfg, codec, glog)
                except Exception as exc:  # never abort the loop
                    glog.warn(t, f"geometry guidance failed: {exc}")
            elif stage == "scale" and do_scale:
                s = raw_strength(cfg, schedule, t, z.size)
                eps = forward_scale_guidance(z, eps, prev, schedule, t, s, codec, glog)
        z0 = predict_clean(z, eps, schedule, t)
        z = ddim_step(z0, eps, schedule, t)
    return z, codec.decode(z)
