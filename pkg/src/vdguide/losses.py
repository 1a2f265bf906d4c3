"""Geometry-consistency losses on a window of depth maps, with analytic gradients.

Every loss returns ``(value, gradient)`` where the gradient has the shape of
the (T, H, W) depth stack. L1 terms use the smoothed absolute value
sqrt(x^2 + eps^2) - eps, which is zero at zero and differentiable everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import DepthSequence, Intrinsics, Pose, _normal_parts, bilinear, relative, warp_field

EPS = 1e-6
TERMS = ("depth", "tracking", "normal", "smoothness")


@dataclass(frozen=True)
class LossWeights:
    alpha_d: float = 35.0
    alpha_t: float = 2.0
    alpha_n: float = 0.1
    alpha_s: float = 1.0

    def __post_init__(self):
        if min(self.alpha_d, self.alpha_t, self.alpha_n, self.alpha_s) < 0:
            raise ValueError("loss weights must be non-negative")

    def as_dict(self) -> dict[str, float]:
        return dict(zip(TERMS, (self.alpha_d, self.alpha_t, self.alpha_n, self.alpha_s)))

    @classmethod
    def zeros(cls) -> "LossWeights":
        return cls(0.0, 0.0, 0.0, 0.0)

    @classmethod
    def only(cls, term: str) -> "LossWeights":
        """Default weight for ``term``, zero for the rest."""
        d = cls().as_dict()
        return cls(*(d[k] if k == term else 0.0 for k in TERMS))


@dataclass
class TrackSet:
    """Pixel correspondences between frames, stored column-wise."""

    frame_a: np.ndarray
    frame_b: np.ndarray
    pixel_a: np.ndarray
    pixel_b: np.ndarray
    confidence: np.ndarray
    outlier: np.ndarray | None = None

    def __post_init__(self):
        self.frame_a = np.asarray(self.frame_a, dtype=np.int64).reshape(-1)
        self.frame_b = np.asarray(self.frame_b, dtype=np.int64).reshape(-1)
        self.pixel_a = np.asarray(self.pixel_a, dtype=np.float64).reshape(-1, 2)
        self.pixel_b = np.asarray(self.pixel_b, dtype=np.float64).reshape(-1, 2)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if self.outlier is None:
            self.outlier = np.zeros(len(self.frame_a), dtype=bool)
        self.outlier = np.asarray(self.outlier, dtype=bool).reshape(-1)

    @classmethod
    def empty(cls) -> "TrackSet":
        return cls(np.zeros(0), np.zeros(0), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))

    def __len__(self):
        return len(self.frame_a)

    @property
    def correspondences(self):
        return list(zip(self.frame_a.tolist(), self.frame_b.tolist(), self.pixel_a, self.pixel_b,
                        self.confidence.tolist()))

    def select(self, keep: np.ndarray) -> "TrackSet":
        return TrackSet(self.frame_a[keep], self.frame_b[keep], self.pixel_a[keep],
                        self.pixel_b[keep], self.confidence[keep], self.outlier[keep])

    def window(self, start: int, end: int) -> "TrackSet":
        """Tracks with both frames in [start, end), re-indexed from 0."""
        keep = (self.frame_a >= start) & (self.frame_a < end) & (self.frame_b >= start) & (self.frame_b < end)
        sub = self.select(keep)
        sub.frame_a = sub.frame_a - start
        sub.frame_b = sub.frame_b - start
        return sub

    def pair(self, a: int, b: int) -> "TrackSet":
        return self.select((self.frame_a == a) & (self.frame_b == b))


@dataclass
class LossReport:
    total: float
    per_term: dict[str, float]
    gradient: np.ndarray
    weighted: dict[str, float] = field(default_factory=dict)


@dataclass
class GeometryContext:
    """Per-window inputs to the geometry losses (frame indices are window-local)."""

    K: Intrinsics
    poses: list[Pose] | None = None
    tracks: TrackSet | None = None
    normals: np.ndarray | None = None  # (T, H, W, 3)
    normal_mask: np.ndarray | None = None
    images: np.ndarray | None = None  # (T, H, W) grayscale
    mask: np.ndarray | None = None

    def window(self, start: int, end: int) -> "GeometryContext":
        sl = slice(start, end)
        return GeometryContext(
            K=self.K,
            poses=None if self.poses is None else list(self.poses[sl]),
            tracks=None if self.tracks is None else self.tracks.window(start, end),
            normals=None if self.normals is None else self.normals[sl],
            normal_mask=None if self.normal_mask is None else self.normal_mask[sl],
            images=None if self.images is None else self.images[sl],
            mask=None if self.mask is None else self.mask[sl],
        )

    def missing(self, weights: LossWeights) -> list[str]:
        need = []
        if weights.alpha_d > 0 and self.poses is None:
            need.append("poses")
        if weights.alpha_t > 0 and (self.poses is None or self.tracks is None):
            need.append("tracks" if self.poses is not None else "poses")
        if weights.alpha_n > 0 and self.normals is None:
            need.append("normals")
        if weights.alpha_s > 0 and self.images is None:
            need.append("images")
        return sorted(set(need))


def smooth_abs(x):
    return np.sqrt(x * x + EPS * EPS) - EPS


def smooth_abs_grad(x):
    return x / np.sqrt(x * x + EPS * EPS)


def _unpack(depths, mask=None):
    if isinstance(depths, DepthSequence):
        return depths.values, depths.mask if mask is None else mask & depths.mask
    d = np.asarray(depths, dtype=np.float64)
    return d, np.ones(d.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)


# ----------------------------------------------------------------- reprojection

def frame_pairs(n_frames: int, max_distance: int = 3) -> list[tuple[int, int]]:
    """Ordered pairs (i, j), i != j, |i - j| <= max_distance."""
    return [(i, j) for i in range(n_frames) for j in range(n_frames)
            if i != j and abs(i - j) <= max_distance]


@dataclass
class ReprojectionWarps:
    """Frozen warp fields for every frame pair, batched by pair."""

    src: np.ndarray
    tgt: np.ndarray
    fields: object  # batched WarpField


def reprojection_warps(depths, poses: list[Pose], K: Intrinsics, mask=None,
                       max_distance: int = 3) -> ReprojectionWarps:
    d, m = _unpack(depths, mask)
    pairs = frame_pairs(len(d), max_distance)
    if not pairs:
        return ReprojectionWarps(np.zeros(0, int), np.zeros(0, int), None)
    src = np.array([p[0] for p in pairs])
    tgt = np.array([p[1] for p in pairs])
    rel = [relative(poses[i], poses[j]) for i, j in pairs]
    R = np.stack([r.rotation for r in rel])
    t = np.stack([r.translation for r in rel])
    wf = warp_field(d[src], m[src], m[tgt], (R, t), K)
    return ReprojectionWarps(src, tgt, wf)


def depth_reprojection_loss(depths, poses: list[Pose], K: Intrinsics, mask=None,
                            warps: ReprojectionWarps | None = None, max_distance: int = 3):
    """Mean |d_i - d_{j->i}| over all frame pairs within ``max_distance``.

    d_{j->i} is frame j's depth sampled where frame i's pixels land, with the
    sampled surface point re-expressed in frame i. The warp field is held
    fixed for differentiation; pass ``warps`` to freeze it explicitly.
    """
    d, m = _unpack(depths, mask)
    grad = np.zeros_like(d)
    if len(d) < 2:
        return 0.0, grad
    if warps is None:
        warps = reprojection_warps(d, poses, K, m, max_distance)
    wf = warps.fields
    T, H, W = d.shape
    sampled = wf.footprint.sample(d[warps.tgt])
    warped = sampled * wf.ray_z + wf.t_z
    valid = wf.valid
    count = valid.reshape(len(warps.src), -1).sum(axis=1)
    live = count > 0
    n_live = int(live.sum())
    if n_live == 0:
        return 0.0, grad
    r = np.where(valid, d[warps.src] - warped, 0.0)
    per_pair = np.where(live, smooth_abs(r).reshape(len(r), -1).sum(axis=1) / np.maximum(count, 1), 0.0)
    loss = float(per_pair[live].sum() / n_live)
    g = np.where(valid, smooth_abs_grad(r), 0.0) / (np.maximum(count, 1) * n_live)[:, None, None]
    # direct term on the source frame
    np.add.at(grad, warps.src, g)
    # sampled term on the target frame, through the fixed footprint
    cot = -g * wf.ray_z
    pair_grads = wf.footprint.scatter(cot, (len(warps.src), H, W))
    np.add.at(grad, warps.tgt, pair_grads)
    return loss, grad


# ---------------------------------------------------------------------- tracking

def tracking_loss(depths, poses: list[Pose], tracks: TrackSet | None, K: Intrinsics, mask=None,
                  min_confidence: float = 0.05):
    """Confidence-weighted mean 3-D distance between tracked points.

    For a track (a, b, p_a, p_b) the point lifted from frame b is moved into
    frame a and compared with the point lifted from frame a. Depth lookups
    are bilinear.
    """
    d, m = _unpack(depths, mask)
    grad = np.zeros_like(d)
    if tracks is None or len(tracks) == 0:
        return 0.0, grad
    T, H, W = d.shape
    keep = (tracks.confidence >= min_confidence) & (tracks.frame_a >= 0) & (tracks.frame_a < T) \
        & (tracks.frame_b >= 0) & (tracks.frame_b < T)
    tr = tracks.select(keep)
    if len(tr) == 0:
        return 0.0, grad
    offset_a = tr.frame_a * H * W
    offset_b = tr.frame_b * H * W
    fa = bilinear(tr.pixel_a[:, 0], tr.pixel_a[:, 1], m[tr.frame_a])
    fb = bilinear(tr.pixel_b[:, 0], tr.pixel_b[:, 1], m[tr.frame_b])
    # footprints above index per-track masks; shift them to index the full stack
    own = (np.arange(len(tr)) * H * W)[None]
    ok = fa.valid & fb.valid
    ia = np.where(ok[None], fa.index - own + offset_a[None], 0)
    ib = np.where(ok[None], fb.index - own + offset_b[None], 0)
    if not ok.any():
        return 0.0, grad
    flat = d.reshape(-1)
    za = np.sum(flat[ia] * fa.weight, axis=0)
    zb = np.sum(flat[ib] * fb.weight, axis=0)
    ray_a = np.column_stack([(tr.pixel_a[:, 0] - K.cx) / K.fx, (tr.pixel_a[:, 1] - K.cy) / K.fy,
                             np.ones(len(tr))])
    ray_b = np.column_stack([(tr.pixel_b[:, 0] - K.cx) / K.fx, (tr.pixel_b[:, 1] - K.cy) / K.fy,
                             np.ones(len(tr))])
    rel = {}
    R = np.empty((len(tr), 3, 3))
    t = np.empty((len(tr), 3))
    for k, (a, b) in enumerate(zip(tr.frame_a.tolist(), tr.frame_b.tolist())):
        if (b, a) not in rel:
            rel[(b, a)] = relative(poses[b], poses[a])
        R[k] = rel[(b, a)].rotation
        t[k] = rel[(b, a)].translation
    Rb = np.einsum("kij,kj->ki", R, ray_b)
    r = za[:, None] * ray_a - (zb[:, None] * Rb + t)
    nrm = np.sqrt(np.sum(r * r, axis=1) + EPS * EPS)
    c = np.where(ok, tr.confidence, 0.0)
    csum = c.sum()
    loss = float(np.sum(c * (nrm - EPS)) / csum)
    gr = (c / csum)[:, None] * r / nrm[:, None]
    ga = np.sum(gr * ray_a, axis=1)
    gb = -np.sum(gr * Rb, axis=1)
    size = d.size
    g = np.bincount(ia.reshape(-1), weights=(fa.weight * ga[None]).reshape(-1), minlength=size)
    g += np.bincount(ib.reshape(-1), weights=(fb.weight * gb[None]).reshape(-1), minlength=size)
    return loss, g.reshape(d.shape)


# ------------------------------------------------------------------------ normal

def normal_loss(depths, reference: np.ndarray, K: Intrinsics, mask=None, reference_mask=None):
    """Mean over valid pixels of 1 - <n_pred, n_ref>, averaged over frames."""
    d, m = _unpack(depths, mask)
    grad = np.zeros_like(d)
    ref = np.asarray(reference, dtype=np.float64)
    X, tx, ty, c, norm, n, ok = _normal_parts(d, m, K)
    if reference_mask is not None:
        ok = ok & reference_mask
    count = ok.reshape(len(d), -1).sum(axis=1)
    live = count > 0
    if not live.any():
        return 0.0, grad
    n_live = live.sum()
    cos = np.sum(n * ref, axis=-1)
    per_frame = np.where(ok, 1.0 - cos, 0.0).reshape(len(d), -1).sum(axis=1) / np.maximum(count, 1)
    loss = float(per_frame[live].sum() / n_live)
    w = np.where(ok, 1.0, 0.0) / (np.maximum(count, 1) * n_live)[:, None, None]
    gn = -ref * w[..., None]
    safe = np.where(ok, norm, 1.0)[..., None]
    gc = (gn - np.sum(gn * n, axis=-1, keepdims=True) * n) / safe
    gc = np.where(ok[..., None], gc, 0.0)
    # c = ty x tx
    g_ty = np.cross(tx, gc)
    g_tx = np.cross(gc, ty)
    gX = np.zeros_like(X)
    gX[..., :, 2:, :] += g_tx[..., :, 1:-1, :]
    gX[..., :, :-2, :] -= g_tx[..., :, 1:-1, :]
    gX[..., 2:, :, :] += g_ty[..., 1:-1, :, :]
    gX[..., :-2, :, :] -= g_ty[..., 1:-1, :, :]
    grad = np.sum(gX * K.rays(*d.shape[-2:]), axis=-1)
    return loss, grad


# -------------------------------------------------------------------- smoothness

def smoothness_loss(depths, images: np.ndarray, mask=None):
    """Edge-aware smoothness |dx d| exp(-|dx I|) + |dy d| exp(-|dy I|).

    Forward differences; averaged over the valid interior of each frame, then
    over frames.
    """
    d, m = _unpack(depths, mask)
    img = np.asarray(images, dtype=np.float64)
    grad = np.zeros_like(d)
    dx = d[:, :-1, 1:] - d[:, :-1, :-1]
    dy = d[:, 1:, :-1] - d[:, :-1, :-1]
    wx = np.exp(-np.abs(img[:, :-1, 1:] - img[:, :-1, :-1]))
    wy = np.exp(-np.abs(img[:, 1:, :-1] - img[:, :-1, :-1]))
    ok = m[:, :-1, :-1] & m[:, :-1, 1:] & m[:, 1:, :-1]
    count = ok.reshape(len(d), -1).sum(axis=1)
    live = count > 0
    if not live.any():
        return 0.0, grad
    n_live = live.sum()
    per_px = np.where(ok, smooth_abs(dx) * wx + smooth_abs(dy) * wy, 0.0)
    loss = float((per_px.reshape(len(d), -1).sum(axis=1)[live] / count[live]).sum() / n_live)
    scale = np.where(ok, 1.0, 0.0) / (np.maximum(count, 1) * n_live)[:, None, None]
    gx = scale * wx * smooth_abs_grad(dx)
    gy = scale * wy * smooth_abs_grad(dy)
    grad[:, :-1, 1:] += gx
    grad[:, :-1, :-1] -= gx
    grad[:, 1:, :-1] += gy
    grad[:, :-1, :-1] -= gy
    return loss, grad


# ------------------------------------------------------------------------- total

def total_geometry_loss(depths, ctx: GeometryContext, weights: LossWeights = LossWeights(),
                        warps: ReprojectionWarps | None = None) -> LossReport:
    """Weighted sum of the four terms; terms with zero weight are skipped."""
    d, m = _unpack(depths, ctx.mask)
    grad = np.zeros_like(d)
    per_term = {k: 0.0 for k in TERMS}
    weighted = {k: 0.0 for k in TERMS}
    w = weights.as_dict()
    total = 0.0
    for term in TERMS:
        if w[term] == 0:
            continue
        if term == "depth":
            v, g = depth_reprojection_loss(d, ctx.poses, ctx.K, m, warps=warps)
        elif term == "tracking":
            v, g = tracking_loss(d, ctx.poses, ctx.tracks, ctx.K, m)
        elif term == "normal":
            v, g = normal_loss(d, ctx.normals, ctx.K, m, ctx.normal_mask)
        else:
            v, g = smoothness_loss(d, ctx.images, m)
        per_term[term] = v
        weighted[term] = w[term] * v
        total += w[term] * v
        grad += w[term] * g
    return LossReport(float(total), per_term, grad, weighted)
