"""Pinhole camera geometry: projection, rigid poses, depth warping, normals."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidInputError

# coordinates this close to an integer are snapped so that integer-aligned
# bilinear lookups are exact passthroughs
_SNAP = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError(f"focal lengths must be positive, got {self.fx}, {self.fy}")

    @classmethod
    def from_image_size(cls, width: int, height: int) -> "Intrinsics":
        """Approximate intrinsics when calibration is unknown.

        Focal length (w + h) / 2, principal point at the image center.
        """
        f = (width + height) / 2.0
        return cls(f, f, width / 2.0, height / 2.0)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def rays(self, height: int, width: int) -> np.ndarray:
        """(H, W, 3) array of K^-1 [u, v, 1] for every integer pixel."""
        v, u = np.mgrid[0:height, 0:width].astype(np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


@dataclass(frozen=True)
class Pose:
    """Rigid transform x_out = R @ x_in + t.

    Trajectories store camera-to-world poses; relative poses between frames
    are built with ``relative``.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, float)).as_matrix(), translation)

    @classmethod
    def from_quaternion(cls, quat_xyzw, translation) -> "Pose":
        return cls(Rotation.from_quat(np.asarray(quat_xyzw, float)).as_matrix(), translation)

    def quaternion(self) -> np.ndarray:
        """Unit quaternion (qx, qy, qz, qw) with qw >= 0."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return (
            np.allclose(R.T @ R, np.eye(3), atol=tol)
            and abs(np.linalg.det(R) - 1.0) <= tol
            and np.all(np.isfinite(self.translation))
        )

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (..., 3) points."""
        return points @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M


def relative(pose_from: Pose, pose_to: Pose) -> Pose:
    """Transform taking camera ``pose_from`` coordinates into camera ``pose_to``.

    Both arguments are camera-to-world.
    """
    return pose_to.inverse() @ pose_from


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    # atan2 form keeps precision for small angles where arccos saturates
    c = (np.trace(R) - 1.0) / 2.0
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(np.linalg.norm(w) / 2.0, c))


def orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass
class DepthMap:
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones(self.values.shape, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 2 or self.mask.shape != self.values.shape:
            raise InvalidInputError("DepthMap needs matching 2-D values and mask")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def check(self):
        v = self.values[self.mask]
        if not (np.all(np.isfinite(v)) and np.all(v > 0)):
            raise InvalidInputError("valid depths must be finite and positive")
        return self


@dataclass
class DepthSequence:
    """T frames of depth sharing one image size; ``values`` is (T, H, W)."""

    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[None]
        if self.mask is None:
            self.mask = np.ones(self.values.shape, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 3 or self.mask.shape != self.values.shape:
            raise InvalidInputError("DepthSequence needs matching (T, H, W) values and mask")
        if len(self.values) < 1:
            raise InvalidInputError("DepthSequence needs at least one frame")

    @classmethod
    def from_frames(cls, frames: list[DepthMap]) -> "DepthSequence":
        return cls(np.stack([f.values for f in frames]), np.stack([f.mask for f in frames]))

    @property
    def frame_count(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def frames(self) -> list[DepthMap]:
        return [self[i] for i in range(self.frame_count)]

    def __len__(self):
        return self.frame_count

    def __getitem__(self, i) -> DepthMap:
        return DepthMap(self.values[i], self.mask[i])

    def slice(self, start: int, end: int) -> "DepthSequence":
        return DepthSequence(self.values[start:end].copy(), self.mask[start:end].copy())

    def copy(self) -> "DepthSequence":
        return DepthSequence(self.values.copy(), self.mask.copy())


@dataclass
class NormalMap:
    vectors: np.ndarray
    mask: np.ndarray

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


def unproject(pixel, depth: float, K: Intrinsics) -> np.ndarray:
    if not depth > 0:
        raise InvalidInputError(f"depth must be positive, got {depth}")
    u, v = float(pixel[0]), float(pixel[1])
    return np.array([depth * (u - K.cx) / K.fx, depth * (v - K.cy) / K.fy, depth])


def project(point, K: Intrinsics) -> tuple[np.ndarray, float]:
    x, y, z = (float(c) for c in point)
    if not z > 0:
        raise InvalidInputError(f"point is behind the camera (z={z})")
    return np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy]), z


def unproject_depth(depth: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Back-project an (..., H, W) depth array to (..., H, W, 3) camera points."""
    H, W = depth.shape[-2:]
    return depth[..., None] * K.rays(H, W)


def project_points(points: np.ndarray, K: Intrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised projection; returns (u, v, z). z <= 0 gives nan pixels."""
    z = points[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(z > 0, z, np.nan)
        u = K.fx * points[..., 0] / safe + K.cx
        v = K.fy * points[..., 1] / safe + K.cy
    return u, v, z


def _snap(x: np.ndarray) -> np.ndarray:
    r = np.round(x)
    return np.where(np.abs(x - r) < _SNAP, r, x)


@dataclass
class Bilinear:
    """Precomputed bilinear footprint on an (H, W) or batched (B, H, W) grid.

    ``index`` holds flat indices into the grid, corner-major with shape
    (4, ...); invalid samples carry zero weights and index 0 so gathers and
    scatters stay vectorised.
    """

    index: np.ndarray  # (4, ...)
    weight: np.ndarray  # (4, ...)
    valid: np.ndarray  # (...)

    def sample(self, grid: np.ndarray) -> np.ndarray:
        g = grid.reshape(-1)
        w = self.weight
        i = self.index
        return g[i[0]] * w[0] + g[i[1]] * w[1] + g[i[2]] * w[2] + g[i[3]] * w[3]

    def scatter(self, cotangent: np.ndarray, shape) -> np.ndarray:
        """Adjoint of ``sample``: accumulate cotangent onto a grid of ``shape``."""
        size = int(np.prod(shape))
        w = (self.weight * np.asarray(cotangent)[None]).reshape(-1)
        return np.bincount(self.index.reshape(-1), weights=w, minlength=size).reshape(shape)


def bilinear(u: np.ndarray, v: np.ndarray, mask: np.ndarray, snapped: bool = False) -> Bilinear:
    """Mask-aware bilinear footprint at (u, v).

    ``mask`` is (H, W), or (B, H, W) with ``u``/``v`` shaped (B, ...). Any
    corner with nonzero weight that is invalid or outside the grid
    invalidates the sample.
    """
    H, W = mask.shape[-2:]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if not snapped:
        u, v = _snap(u), _snap(v)
    with np.errstate(invalid="ignore"):
        inside = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uu = np.where(inside, u, 0.0)
    vv = np.where(inside, v, 0.0)
    u0f = np.floor(uu)
    v0f = np.floor(vv)
    a = uu - u0f
    b = vv - v0f
    u0 = u0f.astype(np.int64)
    v0 = v0f.astype(np.int64)
    # at the last row/column the far corner has zero weight; clamp it in place
    du = (u0 < W - 1).astype(np.int64)
    dv = (v0 < H - 1).astype(np.int64) * W
    base = v0 * W + u0
    if mask.ndim == 3:
        base += (np.arange(mask.shape[0]) * (H * W)).reshape((-1,) + (1,) * (u.ndim - 1))
    index = np.empty((4,) + base.shape, dtype=np.int64)
    index[0] = base
    np.add(base, du, out=index[1])
    np.add(base, dv, out=index[2])
    np.add(index[1], dv, out=index[3])
    w = np.empty((4,) + base.shape)
    ia, ib = 1.0 - a, 1.0 - b
    np.multiply(ia, ib, out=w[0])
    np.multiply(a, ib, out=w[1])
    np.multiply(ia, b, out=w[2])
    np.multiply(a, b, out=w[3])
    valid = inside
    if not mask.all():
        m = mask.reshape(-1)
        for k in range(4):
            valid = valid & (m[index[k]] | (w[k] == 0))
    inval = ~valid
    if inval.any():
        w[:, inval] = 0.0
        index[:, inval] = 0
    return Bilinear(index, w, valid)


@dataclass
class WarpField:
    """Where each source pixel lands in the target image.

    ``ray_z`` is the z-row of R_tgt_to_src applied to the target ray at the
    landing point; with ``t_z`` it re-expresses sampled target depth in
    source coordinates: z_src = depth_tgt * ray_z + t_z.
    """

    footprint: Bilinear
    z_in_target: np.ndarray
    ray_z: np.ndarray
    t_z: np.ndarray | float

    @property
    def valid(self) -> np.ndarray:
        return self.footprint.valid


def warp_field(src_depth: np.ndarray, src_mask: np.ndarray, tgt_mask: np.ndarray,
               T_src_to_tgt, K: Intrinsics) -> WarpField:
    """Warp field for one pair, or a batch of pairs.

    ``T_src_to_tgt`` is a Pose, or a (rotations (B, 3, 3), translations (B, 3))
    tuple when the depth and mask arguments are stacked (B, H, W).
    """
    H, W = src_depth.shape[-2:]
    rays = K.rays(H, W).reshape(-1, 3)
    if isinstance(T_src_to_tgt, Pose):
        R, t = T_src_to_tgt.rotation[None], T_src_to_tgt.translation[None]
        d = src_depth.reshape(1, -1)
    else:
        R, t = T_src_to_tgt
        d = src_depth.reshape(len(R), -1)
    # rotate the rays once per pair, then scale by depth
    pts = d[..., None] * np.matmul(rays, np.transpose(R, (0, 2, 1))) + t[:, None, :]
    z = pts[..., 2]
    ok = src_mask.reshape(d.shape) & (z > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        iz = np.where(ok, 1.0 / z, np.nan)
    u = _snap(K.fx * pts[..., 0] * iz + K.cx)
    v = _snap(K.fy * pts[..., 1] * iz + K.cy)
    shape = src_depth.shape
    u, v, z = u.reshape(shape), v.reshape(shape), z.reshape(shape)
    fp = bilinear(u, v, tgt_mask, snapped=True)
    # target ray at the landing pixel, rotated back into the source frame
    # (R_inv = R^T, so its z-row is R's third column)
    ru = (np.nan_to_num(u) - K.cx) / K.fx
    rv = (np.nan_to_num(v) - K.cy) / K.fy
    t_inv_z = -np.einsum("bi,bi->b", R[:, :, 2], t)
    if isinstance(T_src_to_tgt, Pose):
        r = R[0, :, 2]
        ray_z = r[0] * ru + r[1] * rv + r[2]
        t_z = float(t_inv_z[0])
    else:
        r = R[:, :, 2][:, :, None, None]
        ray_z = r[:, 0] * ru + r[:, 1] * rv + r[:, 2]
        t_z = t_inv_z[:, None, None]
    return WarpField(fp, z, ray_z, t_z)


def warp_depth(source: DepthMap, target: DepthMap, T_src_to_tgt: Pose, K: Intrinsics,
               to_source_frame: bool = False) -> DepthMap:
    """Resample ``target`` depth onto the source pixel grid.

    Each valid source pixel is lifted with its own depth, moved into the
    target camera and projected; the target depth is sampled there. With
    ``to_source_frame`` the sampled target surface point is expressed back in
    source coordinates, so a consistent static scene reproduces the source
    depth exactly.
    """
    if source.values.shape != target.values.shape:
        raise InvalidInputError(f"shape mismatch {source.values.shape} vs {target.values.shape}")
    wf = warp_field(source.values, source.mask, target.mask, T_src_to_tgt, K)
    sampled = wf.footprint.sample(target.values)
    if to_source_frame:
        sampled = sampled * wf.ray_z + wf.t_z
    mask = wf.valid & (sampled > 0) if to_source_frame else wf.valid
    return DepthMap(np.where(mask, sampled, 0.0), mask)


def _normal_parts(depth: np.ndarray, mask: np.ndarray, K: Intrinsics):
    """Shared forward pass for normals; also used by the normal loss."""
    H, W = depth.shape[-2:]
    X = unproject_depth(depth, K)
    tx = np.zeros_like(X)
    ty = np.zeros_like(X)
    tx[..., :, 1:-1, :] = X[..., :, 2:, :] - X[..., :, :-2, :]
    ty[..., 1:-1, :, :] = X[..., 2:, :, :] - X[..., :-2, :, :]
    c = np.cross(ty, tx)
    norm = np.linalg.norm(c, axis=-1)
    interior = np.zeros(mask.shape, dtype=bool)
    interior[..., 1:-1, 1:-1] = (
        mask[..., 1:-1, 1:-1] & mask[..., 1:-1, 2:] & mask[..., 1:-1, :-2]
        & mask[..., 2:, 1:-1] & mask[..., :-2, 1:-1]
    )
    scale = np.maximum(np.abs(depth), 1e-12) ** 2 / (K.fx * K.fy)
    ok = interior & (norm > 1e-12 * scale)
    n = np.where(ok[..., None], c / np.where(norm > 0, norm, 1.0)[..., None], 0.0)
    return X, tx, ty, c, norm, n, ok


def normals_from_depth(d: DepthMap, K: Intrinsics) -> NormalMap:
    """Camera-facing unit normals from central-difference tangents.

    Border pixels and pixels with an invalid 4-neighbour are masked out.
    """
    *_, n, ok = _normal_parts(d.values, d.mask, K)
    return NormalMap(n, ok)
