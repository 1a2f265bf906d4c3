"""Analytic synthetic scenes (depth, images, poses, normals, tracks) and their corruption.

World frame follows the camera convention: x right, y down, z forward. The
camera at frame 0 sits at ``SceneSpec.origin`` looking along +z.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .align import AffineParams
from .errors import GenerationError, InvalidConfigError, InvalidInputError
from .geom import DepthSequence, Intrinsics, Pose
from .losses import TrackSet
from .pose import Trajectory

LAYOUTS = ("box_room", "plane_field", "random_heightfield")
TRAJECTORIES = ("orbit", "dolly", "lateral", "static")

_DEFAULT_DIMS = {
    "box_room": (4.0, 3.0, 10.0),
    "plane_field": (20.0, 3.0, 10.0),
    "random_heightfield": (20.0, 0.3, 6.0),
}


@dataclass(frozen=True)
class SceneSpec:
    layout: str = "box_room"
    dimensions: tuple[float, float, float] | None = None
    trajectory: str = "orbit"
    speed: float = 0.02
    frame_count: int = 150
    image_size: tuple[int, int] = (32, 24)  # (width, height)
    seed: int = 0
    tracks_per_pair: int = 96
    orbit_radius: float = 0.3
    yaw_amplitude: float = 0.15
    checker_size: float = 0.5

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise InvalidConfigError(f"unknown layout {self.layout!r}")
        if self.trajectory not in TRAJECTORIES:
            raise InvalidConfigError(f"unknown trajectory {self.trajectory!r}")
        if self.frame_count < 2:
            raise InvalidConfigError("frame_count must be >= 2")
        if self.speed < 0:
            raise InvalidConfigError("speed must be non-negative")
        if min(self.dims) <= 0:
            raise InvalidConfigError("dimensions must be positive")
        w, h = self.image_size
        if w < 3 or h < 3:
            raise InvalidConfigError("image must be at least 3x3")

    @property
    def dims(self) -> tuple[float, float, float]:
        return tuple(self.dimensions) if self.dimensions is not None else _DEFAULT_DIMS[self.layout]

    @property
    def origin(self) -> np.ndarray:
        if self.layout == "box_room":
            # 6 m from the far wall
            return np.array([0.0, 0.0, self.dims[2] / 2.0 - 6.0])
        return np.zeros(3)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dimensions"] = list(self.dims)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        if d.get("dimensions") is not None:
            d["dimensions"] = tuple(d["dimensions"])
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(**d)


@dataclass(frozen=True)
class CorruptionSpec:
    per_window_scale_drift: float = 1.0
    per_window_shift_drift: float = 0.0
    depth_noise_sigma: float = 0.0
    normal_bias: float = 0.0  # radians
    track_noise_sigma: float = 0.0  # pixels
    outlier_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.per_window_scale_drift > 0:
            raise InvalidConfigError("scale drift must be positive")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise InvalidConfigError("outlier_fraction must be in [0, 1]")
        if self.depth_noise_sigma < 0 or self.track_noise_sigma < 0 or self.normal_bias < 0:
            raise InvalidConfigError("noise levels must be non-negative")

    @property
    def is_identity(self) -> bool:
        return (self.per_window_scale_drift == 1.0 and self.per_window_shift_drift == 0.0
                and self.depth_noise_sigma == 0.0 and self.normal_bias == 0.0
                and self.track_noise_sigma == 0.0 and self.outlier_fraction == 0.0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SceneBundle:
    spec: SceneSpec
    K: Intrinsics
    gt_depth: DepthSequence
    images: np.ndarray  # (T, H, W) in [0, 1]
    gt_poses: Trajectory
    gt_normals: np.ndarray  # (T, H, W, 3), camera frame
    normal_mask: np.ndarray
    gt_tracks: TrackSet
    surface_id: np.ndarray

    @property
    def frame_count(self) -> int:
        return self.gt_depth.frame_count


@dataclass
class CorruptedBundle:
    spec: CorruptionSpec
    window_targets: list[DepthSequence]
    depth: DepthSequence  # assembled: later window wins past the overlap midpoint
    tracks: TrackSet
    normals: np.ndarray
    normal_mask: np.ndarray
    params: list[AffineParams]
    windows: list[tuple[int, int]]
    noise: np.ndarray | None = None

    def params_json(self) -> str:
        return json.dumps({
            "windows": [list(w) for w in self.windows],
            "scale": [p.scale for p in self.params],
            "shift": [p.shift for p in self.params],
            "spec": self.spec.to_dict(),
        }, indent=2, sort_keys=True)


# ------------------------------------------------------------------ trajectories

def _rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def camera_poses(spec: SceneSpec) -> list[Pose]:
    """Camera-to-world poses for every frame."""
    c0 = spec.origin
    poses = []
    for k in range(spec.frame_count):
        if spec.trajectory == "static" or spec.speed == 0:
            poses.append(Pose(np.eye(3), c0))
        elif spec.trajectory == "dolly":
            poses.append(Pose(np.eye(3), c0 + [0.0, 0.0, k * spec.speed]))
        elif spec.trajectory == "lateral":
            poses.append(Pose(np.eye(3), c0 + [k * spec.speed, 0.0, 0.0]))
        else:
            r = spec.orbit_radius
            th = k * spec.speed / r
            pos = c0 + [r * np.sin(th), 0.15 * r * np.sin(2 * th), r * (1 - np.cos(th))]
            poses.append(Pose(_rot_y(spec.yaw_amplitude * np.sin(th)), pos))
    return poses


def _check_inside(spec: SceneSpec, poses: list[Pose], margin: float = 0.1):
    wx, wy, wz = spec.dims
    for k, p in enumerate(poses):
        x, y, z = p.translation
        if spec.layout == "box_room":
            out = abs(x) > wx / 2 - margin or abs(y) > wy / 2 - margin or abs(z) > wz / 2 - margin
        elif spec.layout == "plane_field":
            out = z > wz - margin or y > wy / 2 - margin
        else:
            out = z > wz - 1.0 - margin
        if out:
            raise GenerationError(f"camera leaves the scene volume at frame {k}", frame=k)


# ------------------------------------------------------------------- ray casting

def _cast_box(o, d, dims):
    half = np.asarray(dims) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        tpos = (half - o) / d
        tneg = (-half - o) / d
    t_axis = np.where(d > 0, tpos, np.where(d < 0, tneg, np.inf))
    axis = np.argmin(t_axis, axis=-1)
    t = np.take_along_axis(t_axis, axis[..., None], axis=-1)[..., 0]
    sign = np.sign(np.take_along_axis(d, axis[..., None], axis=-1)[..., 0])
    n = np.zeros(d.shape)
    np.put_along_axis(n, axis[..., None], -sign[..., None], axis=-1)
    sid = axis * 2 + (sign > 0)
    return t, n, sid


def _cast_planes(o, d, dims):
    _, floor_y, back_z = dims
    with np.errstate(divide="ignore", invalid="ignore"):
        t_back = np.where(d[..., 2] > 0, (back_z - o[2]) / d[..., 2], np.inf)
        t_floor = np.where(d[..., 1] > 0, (floor_y / 2 - o[1]) / d[..., 1], np.inf)
    use_floor = t_floor < t_back
    t = np.where(use_floor, t_floor, t_back)
    n = np.zeros(d.shape)
    n[..., 1] = np.where(use_floor, -1.0, 0.0)
    n[..., 2] = np.where(use_floor, 0.0, -1.0)
    return t, n, use_floor.astype(np.int64)


class _Heightfield:
    """z = base + sum a_i sin(k_i . (x, y) + phase_i)."""

    def __init__(self, dims, seed):
        rng = np.random.default_rng(seed + 7919)
        self.base = dims[2]
        amp = dims[1]
        self.a = amp * rng.uniform(0.4, 1.0, 4) / 2.0
        ang = rng.uniform(0, 2 * np.pi, 4)
        mag = 2 * np.pi / rng.uniform(2.0, 4.0, 4)
        self.k = np.column_stack([mag * np.cos(ang), mag * np.sin(ang)])
        self.ph = rng.uniform(0, 2 * np.pi, 4)

    def h(self, x, y):
        arg = x[..., None] * self.k[:, 0] + y[..., None] * self.k[:, 1] + self.ph
        return self.base + np.sum(self.a * np.sin(arg), axis=-1)

    def grad(self, x, y):
        arg = x[..., None] * self.k[:, 0] + y[..., None] * self.k[:, 1] + self.ph
        c = self.a * np.cos(arg)
        return np.sum(c * self.k[:, 0], axis=-1), np.sum(c * self.k[:, 1], axis=-1)

    def cast(self, o, d):
        t = (self.base - o[2]) / d[..., 2]
        for _ in range(50):
            x = o[0] + t * d[..., 0]
            y = o[1] + t * d[..., 1]
            f = o[2] + t * d[..., 2] - self.h(x, y)
            hx, hy = self.grad(x, y)
            df = d[..., 2] - hx * d[..., 0] - hy * d[..., 1]
            step = f / df
            t = t - step
            if np.max(np.abs(step)) < 1e-13:
                break
        x = o[0] + t * d[..., 0]
        y = o[1] + t * d[..., 1]
        hx, hy = self.grad(x, y)
        n = np.stack([hx, hy, -np.ones_like(hx)], axis=-1)
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        return t, n, np.zeros(t.shape, dtype=np.int64)


def _albedo(X, n_world, cell):
    # checker on the two in-surface coordinates of the dominant normal axis
    ax = np.argmax(np.abs(n_world), axis=-1)
    a = np.where(ax == 0, X[..., 1], X[..., 0])
    b = np.where(ax == 2, X[..., 1], X[..., 2])
    chk = (np.floor(a / cell) + np.floor(b / cell)).astype(np.int64) % 2
    return np.where(chk == 0, 0.35, 0.75)


_LIGHT = np.array([0.3, -0.8, -0.5]) / np.linalg.norm([0.3, -0.8, -0.5])


def render_frame(spec: SceneSpec, pose: Pose, K: Intrinsics, hf: _Heightfield | None = None):
    """Depth, camera-frame normals, surface id and image for one pose."""
    W, H = spec.image_size
    rays = K.rays(H, W)
    d = rays @ pose.rotation.T
    o = pose.translation
    if spec.layout == "box_room":
        t, n_w, sid = _cast_box(o, d, spec.dims)
    elif spec.layout == "plane_field":
        t, n_w, sid = _cast_planes(o, d, spec.dims)
    else:
        t, n_w, sid = hf.cast(o, d)
    X = o + t[..., None] * d
    shade = 0.3 + 0.7 * np.clip(n_w @ -_LIGHT, 0.0, 1.0)
    img = np.clip(_albedo(X, n_w, spec.checker_size) * shade, 0.0, 1.0)
    n_cam = n_w @ pose.rotation
    return t, n_cam, sid, img


def _normal_valid(sid: np.ndarray, finite: np.ndarray) -> np.ndarray:
    ok = np.zeros(sid.shape, dtype=bool)
    c = sid[..., 1:-1, 1:-1]
    ok[..., 1:-1, 1:-1] = (
        finite[..., 1:-1, 1:-1]
        & (sid[..., 1:-1, 2:] == c) & (sid[..., 1:-1, :-2] == c)
        & (sid[..., 2:, 1:-1] == c) & (sid[..., :-2, 1:-1] == c)
    )
    return ok


def _make_tracks(depth, poses, K, spec, rng) -> TrackSet:
    T, H, W = depth.shape
    fa, fb, pa, pb = [], [], [], []
    vv, uu = np.mgrid[1:H - 1, 1:W - 1]
    cand = np.column_stack([uu.reshape(-1), vv.reshape(-1)])
    for a in range(T - 1):
        pick = cand[rng.choice(len(cand), size=min(spec.tracks_per_pair, len(cand)), replace=False)]
        pick = pick[np.lexsort((pick[:, 0], pick[:, 1]))]
        z = depth[a, pick[:, 1], pick[:, 0]]
        Xa = np.column_stack([z * (pick[:, 0] - K.cx) / K.fx, z * (pick[:, 1] - K.cy) / K.fy, z])
        rel = poses[a + 1].inverse() @ poses[a]
        Xb = rel.apply(Xa)
        ub = K.fx * Xb[:, 0] / Xb[:, 2] + K.cx
        vb = K.fy * Xb[:, 1] / Xb[:, 2] + K.cy
        inside = (Xb[:, 2] > 0) & (ub >= 0) & (ub <= W - 1) & (vb >= 0) & (vb <= H - 1)
        if inside.any():
            # visibility: the nearest-pixel depth in frame b must agree
            ui = np.clip(np.round(ub).astype(int), 0, W - 1)
            vi = np.clip(np.round(vb).astype(int), 0, H - 1)
            inside &= np.abs(depth[a + 1, vi, ui] - Xb[:, 2]) < 0.05 * Xb[:, 2]
        k = int(inside.sum())
        fa.append(np.full(k, a))
        fb.append(np.full(k, a + 1))
        pa.append(pick[inside].astype(np.float64))
        pb.append(np.column_stack([ub[inside], vb[inside]]))
    n = sum(len(x) for x in fa)
    return TrackSet(np.concatenate(fa), np.concatenate(fb), np.concatenate(pa).reshape(-1, 2),
                    np.concatenate(pb).reshape(-1, 2), np.ones(n))


def generate_scene(spec: SceneSpec) -> SceneBundle:
    """Render the full ground-truth bundle for ``spec``.

    Raises GenerationError (with the frame index) when the camera path
    leaves the scene volume.
    """
    W, H = spec.image_size
    K = Intrinsics.from_image_size(W, H)
    poses = camera_poses(spec)
    _check_inside(spec, poses)
    hf = _Heightfield(spec.dims, spec.seed) if spec.layout == "random_heightfield" else None
    frames = [render_frame(spec, p, K, hf) for p in poses]
    depth = np.stack([f[0] for f in frames])
    normals = np.stack([f[1] for f in frames])
    sid = np.stack([f[2] for f in frames])
    images = np.stack([f[3] for f in frames])
    finite = np.isfinite(depth) & (depth > 0)
    if not finite.all():
        bad = int(np.argmax(~finite.reshape(len(depth), -1).all(axis=1)))
        raise GenerationError(f"rays miss the scene at frame {bad}", frame=bad)
    rng = np.random.default_rng(spec.seed)
    tracks = _make_tracks(depth, poses, K, spec, rng)
    return SceneBundle(spec, K, DepthSequence(depth), images, Trajectory(poses), normals,
                       _normal_valid(sid, finite), tracks, sid)


# -------------------------------------------------------------------- corruption

def _rotate_normals(n: np.ndarray, angle: float, rng) -> np.ndarray:
    """Rotate every vector by exactly ``angle`` about a random perpendicular axis."""
    r = rng.standard_normal(n.shape)
    axis = np.cross(n, r)
    axis /= np.maximum(np.linalg.norm(axis, axis=-1, keepdims=True), 1e-300)
    # rotation about an axis perpendicular to n: n' = n cos a + (axis x n) sin a
    out = n * np.cos(angle) + np.cross(axis, n) * np.sin(angle)
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def corrupt(scene: SceneBundle, plan, spec: CorruptionSpec) -> CorruptedBundle:
    """Per-window affine drift plus depth, normal and track noise.

    Window w's target is scale_drift**w * (gt + noise) + w * shift_drift,
    with the noise drawn once per frame so windows agree up to their affine.
    The assembled sequence switches from the earlier to the later window at
    the midpoint of each overlap.
    """
    windows = list(plan.windows if hasattr(plan, "windows") else plan)
    gt = scene.gt_depth
    T = gt.frame_count
    if not windows or windows[0][0] != 0 or windows[-1][1] != T:
        raise InvalidInputError(f"window plan does not cover the {T}-frame scene")
    rng = np.random.default_rng(spec.seed)
    noise = None
    base = gt.values
    if spec.depth_noise_sigma > 0:
        noise = rng.normal(0.0, spec.depth_noise_sigma, gt.shape)
        base = gt.values + noise
    params, targets = [], []
    for w, (a, b) in enumerate(windows):
        s = spec.per_window_scale_drift ** w
        t = w * spec.per_window_shift_drift
        params.append(AffineParams(float(s), float(t)))
        vals = base[a:b] if (s == 1.0 and t == 0.0) else s * base[a:b] + t
        vals = np.array(vals, copy=True)
        targets.append(DepthSequence(vals, gt.mask[a:b] & (vals > 0)))

    owner = np.zeros(T, dtype=np.int64)
    for w in range(1, len(windows)):
        a = windows[w][0]
        prev_end = windows[w - 1][1]
        mid = a + (prev_end - a) // 2
        owner[mid:] = w
    depth = np.empty_like(gt.values)
    mask = np.empty_like(gt.mask)
    for f in range(T):
        w = owner[f]
        depth[f] = targets[w].values[f - windows[w][0]]
        mask[f] = targets[w].mask[f - windows[w][0]]

    tracks = TrackSet(scene.gt_tracks.frame_a.copy(), scene.gt_tracks.frame_b.copy(),
                      scene.gt_tracks.pixel_a.copy(), scene.gt_tracks.pixel_b.copy(),
                      scene.gt_tracks.confidence.copy())
    Wd, Hd = scene.spec.image_size
    if spec.track_noise_sigma > 0:
        tracks.pixel_b = np.clip(tracks.pixel_b + rng.normal(0.0, spec.track_noise_sigma, tracks.pixel_b.shape),
                                 [0, 0], [Wd - 1, Hd - 1])
    n_out = int(np.floor(spec.outlier_fraction * len(tracks)))
    if n_out > 0:
        idx = rng.permutation(len(tracks))[:n_out]
        tracks.pixel_b[idx] = rng.uniform([0, 0], [Wd - 1, Hd - 1], (n_out, 2))
        tracks.outlier[idx] = True

    normals = scene.gt_normals.copy()
    if spec.normal_bias > 0:
        normals = _rotate_normals(normals, spec.normal_bias, rng)
    return CorruptedBundle(spec, targets, DepthSequence(depth, mask), tracks, normals,
                           scene.normal_mask.copy(), params, windows, noise)
