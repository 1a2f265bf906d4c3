"""Sliding-window orchestration: planning, overlap initialisation, handoff and assembly."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .align import apply_affine, fit_affine
from .errors import DegenerateFitError, InvalidConfigError
from .geom import DepthSequence, Intrinsics
from .guide import (GuidanceConfig, GuidanceLog, NoiseSchedule, OverlapRef, denoise_window,
                    geometry_descent)
from .losses import GeometryContext, TrackSet
from .pose import RansacConfig, derive_trajectory

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WindowPlan:
    windows: tuple[tuple[int, int], ...]
    overlap: int

    def __len__(self):
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)

    @property
    def total_frames(self) -> int:
        return self.windows[-1][1]

    def shared(self, w: int) -> tuple[int, int]:
        """Frame range window ``w`` shares with window ``w - 1``."""
        if w == 0:
            return (self.windows[0][0], self.windows[0][0])
        return (self.windows[w][0], self.windows[w - 1][1])


def plan_windows(total_frames: int, window_size: int, overlap: int) -> WindowPlan:
    """Windows at stride window_size - overlap; the last one is shifted left to end at T."""
    if not 0 < overlap < window_size:
        raise InvalidConfigError(f"need 0 < overlap ({overlap}) < window_size ({window_size})")
    if total_frames < window_size:
        raise InvalidConfigError(f"video of {total_frames} frames is shorter than one window")
    stride = window_size - overlap
    starts = [0]
    while starts[-1] + window_size < total_frames:
        starts.append(starts[-1] + stride)
    starts[-1] = min(starts[-1], total_frames - window_size)
    return WindowPlan(tuple((s, s + window_size) for s in starts), overlap)


@dataclass(frozen=True)
class PipelineConfig:
    window_size: int = 90
    overlap: int = 30
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule.geometric)
    init_noise_level: int | None = None  # step whose alpha re-noises the overlap; None = T
    blend: float = 0.5
    seed: int = 0
    post: str = "none"  # none | scale | geometry | both
    ransac: RansacConfig = field(default_factory=RansacConfig)

    def __post_init__(self):
        if not 0 < self.overlap < self.window_size:
            raise InvalidConfigError("need 0 < overlap < window_size")
        if not 0.0 <= self.blend <= 1.0:
            raise InvalidConfigError("blend must lie in [0, 1]")
        if self.post not in ("none", "scale", "geometry", "both"):
            raise InvalidConfigError(f"unknown post mode {self.post!r}")


def init_window(prev_denoised: np.ndarray | None, shape, schedule, rng_seed: int,
                overlap: int = 0, alpha: float | None = None) -> np.ndarray:
    """Initial latent for a window.

    Every frame gets seeded Gaussian noise; the first ``overlap`` frames
    instead re-noise the tail of ``prev_denoised`` to the signal level
    ``alpha`` (default: the schedule's first step).
    """
    rng = np.random.default_rng(rng_seed)
    z = rng.standard_normal(tuple(shape))
    if prev_denoised is not None and overlap > 0:
        a = schedule.alpha(schedule.steps) if alpha is None else float(alpha)
        tail = np.asarray(prev_denoised)[-overlap:]
        if a >= 1.0:
            z[:overlap] = tail
        else:
            z[:overlap] = np.sqrt(a) * tail + np.sqrt(1.0 - a) * z[:overlap]
    return z


@dataclass
class VideoInput:
    """Everything the pipeline may need besides the denoiser."""

    K: Intrinsics
    frame_count: int
    images: np.ndarray | None = None
    tracks: TrackSet | None = None
    normals: np.ndarray | None = None
    normal_mask: np.ndarray | None = None
    poses: list | None = None  # ground-truth camera-to-world, used when pose_source = "gt"
    shape: tuple[int, int] | None = None  # (H, W)


@dataclass
class RunResult:
    depth: DepthSequence
    plan: WindowPlan
    window_latents: list[np.ndarray]
    window_depths: list[DepthSequence]
    logs: list[GuidanceLog]
    errors: list[dict]
    timings: dict
    pose_gaps: list[dict] = field(default_factory=list)

    def report(self) -> dict:
        return {
            "windows": [list(w) for w in self.plan.windows],
            "window_logs": [g.to_dict() for g in self.logs],
            "errors": self.errors,
            "pose_gaps": self.pose_gaps,
            "timings": self.timings,
        }


def window_context(video: VideoInput, start: int, end: int, cfg: GuidanceConfig,
                   depth: np.ndarray | None = None, ransac: RansacConfig = RansacConfig(),
                   gaps: list | None = None) -> GeometryContext:
    """Geometry context for frames [start, end).

    With pose_source "pnp" the poses come from PnP-RANSAC on ``depth`` (the
    window's decoded clean sample) and the tracks; with "gt" they are the
    supplied ground-truth poses.
    """
    tracks = video.tracks.window(start, end) if video.tracks is not None else None
    poses = None
    if cfg.pose_source == "gt" and video.poses is not None:
        poses = list(video.poses[start:end])
    elif cfg.pose_source == "pnp" and depth is not None and tracks is not None:
        traj = derive_trajectory(depth, tracks, video.K, ransac)
        poses = traj.poses
        if gaps is not None and traj.gaps:
            gaps.extend({"frame": start + g} for g in traj.gaps)
    sl = slice(start, end)
    return GeometryContext(
        K=video.K,
        poses=poses,
        tracks=tracks,
        normals=None if video.normals is None else video.normals[sl],
        normal_mask=None if video.normal_mask is None else video.normal_mask[sl],
        images=None if video.images is None else video.images[sl],
    )


def assemble(latents: list[np.ndarray], plan: WindowPlan, blend: float) -> np.ndarray:
    """Full-length latent; shared frames are blend * current + (1 - blend) * previous."""
    T = plan.total_frames
    out = np.empty((T,) + latents[0].shape[1:])
    for w, ((a, b), z) in enumerate(zip(plan.windows, latents)):
        if w == 0:
            out[a:b] = z
            continue
        s, e = plan.shared(w)
        k = e - s
        out[s:e] = blend * z[:k] + (1.0 - blend) * out[s:e]
        out[e:b] = z[k:]
    return out


def run_video(video: VideoInput, denoiser, codec, cfg: PipelineConfig) -> RunResult:
    """Denoise every window in order, handing the overlap to the next window."""
    plan = plan_windows(video.frame_count, cfg.window_size, cfg.overlap)
    g = cfg.guidance
    schedule = cfg.schedule
    H, W = video.shape if video.shape is not None else video.images.shape[1:]
    lat_shape = codec.latent_shape((cfg.window_size, H, W)) if hasattr(codec, "latent_shape") \
        else (cfg.window_size, H, W)
    latents, depths, logs, errors, gaps = [], [], [], [], []
    t0 = time.perf_counter()
    per_window = []
    for w, (a, b) in enumerate(plan.windows):
        tw = time.perf_counter()
        glog = GuidanceLog(window=w)
        prev_ref = None
        k = 0
        if w > 0:
            s, e = plan.shared(w)
            k = e - s
            pa = plan.windows[w - 1][0]
            prev_ref = OverlapRef(np.arange(k), latents[-1][s - pa:e - pa])
        alpha = schedule.alpha(cfg.init_noise_level) if cfg.init_noise_level else None
        z_init = init_window(prev_ref.latent if prev_ref is not None else None, lat_shape, schedule,
                             cfg.seed + w, overlap=k, alpha=alpha)
        ctx = None
        hook = None
        if g.geometry_enabled:
            if g.pose_source == "gt":
                ctx = window_context(video, a, b, g)
            else:
                def hook(depth0, a=a, b=b):
                    return window_context(video, a, b, g, depth0, cfg.ransac, gaps)
        try:
            z, _ = denoise_window(z_init, denoiser, codec, schedule, g, prev_ref, ctx,
                                  cond={"window": w, "frames": (a, b)}, glog=glog, context_hook=hook)
        except Exception as exc:
            errors.append({"window": w, "error": repr(exc)})
            log.error("window %d failed: %s", w, exc)
            z = z_init
        latents.append(z)
        depths.append(DepthSequence(codec.decode(z)))
        logs.append(glog)
        per_window.append(time.perf_counter() - tw)
    full = codec.decode(assemble(latents, plan, cfg.blend))
    result = DepthSequence(full)
    timings = {"total_s": time.perf_counter() - t0, "per_window_s": per_window}
    res = RunResult(result, plan, latents, depths, logs, errors, timings, gaps)
    if cfg.post != "none":
        res.depth, res.window_depths = post_optimize(depths, plan, video, cfg, mode=cfg.post,
                                                     return_windows=True)
    return res


def _chain_scale(window_depths: list[DepthSequence], plan: WindowPlan, warns: list) -> list[DepthSequence]:
    out = [window_depths[0].copy()]
    for w in range(1, len(window_depths)):
        s, e = plan.shared(w)
        k = e - s
        pa = plan.windows[w - 1][0]
        prev = out[-1].values[s - pa:e - pa]
        cur = window_depths[w]
        try:
            p = fit_affine(cur.slice(0, k), DepthSequence(prev))
            out.append(apply_affine(cur, p))
        except DegenerateFitError as exc:
            warns.append({"window": w, "step": 0, "message": f"post scale fit skipped: {exc}"})
            out.append(cur.copy())
    return out


def post_optimize(pred, plan: WindowPlan, video: VideoInput, cfg: PipelineConfig, mode: str = "both",
                  return_windows: bool = False):
    """Apply the guidance regularisers once, after inference.

    ``pred`` is the list of per-window predictions (or an assembled
    DepthSequence, which is then split along ``plan``). "scale" chains an
    overlap affine fit from window to window; "geometry" runs the same
    safeguarded descent the in-loop guidance uses. With "both" they run in
    the configured guidance order. The windows are reassembled with the
    configured blend.
    """
    if isinstance(pred, DepthSequence):
        windows = [pred.slice(a, b) for a, b in plan.windows]
    else:
        windows = [w.copy() for w in pred]
    g = cfg.guidance
    warns: list = []

    def geometry(ws):
        out = []
        for (a, b), d in zip(plan.windows, ws):
            ctx = window_context(video, a, b, g, d.values, cfg.ransac)
            if ctx.missing(g.geometry_weights):
                warns.append({"window": 0, "step": 0, "message": f"missing context {ctx.missing(g.geometry_weights)}"})
                out.append(d)
                continue
            res = geometry_descent(d.values, ctx, g.geometry_weights, g.inner_steps,
                                   g.inner_step_size, g.max_halvings)
            out.append(DepthSequence(res.depth, d.mask))
        return out

    stages = {"scale": ["scale"], "geometry": ["geometry"],
              "both": ["geometry", "scale"] if g.order == "geometry_then_scale" else ["scale", "geometry"]}[mode]
    for st in stages:
        windows = _chain_scale(windows, plan, warns) if st == "scale" else geometry(windows)
    for wm in warns:
        log.warning("post-optimisation: %s", wm["message"])
    full = assemble([w.values for w in windows], plan, cfg.blend)
    out = DepthSequence(full)
    return (out, windows) if return_windows else out
