"""Camera pose recovery from 2-D/3-D correspondences (PnP, RANSAC, trajectory chaining)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateConfigurationError, RobustFailureError
from .geom import Intrinsics, Pose, bilinear, orthonormalize

log = logging.getLogger(__name__)


@dataclass
class Trajectory:
    """Camera-to-world poses, one per frame."""

    poses: list[Pose]
    frames: list[int] | None = None
    gaps: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.frames is None:
            self.frames = list(range(len(self.poses)))
        if len(self.frames) != len(self.poses):
            raise ValueError("frames and poses differ in length")

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i) -> Pose:
        return self.poses[i]

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])

    def slice(self, start: int, end: int) -> "Trajectory":
        return Trajectory(self.poses[start:end], self.frames[start:end])


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 500
    inlier_threshold: float = 2.0
    min_inliers: int = 12
    seed: int = 0
    confidence: float = 0.999

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")


def reprojection_errors(pose: Pose, points3d: np.ndarray, pixels: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Per-point pixel distance; points behind the camera get +inf."""
    Xc = points3d @ pose.rotation.T + pose.translation
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * Xc[:, 0] / z + K.cx
        v = K.fy * Xc[:, 1] / z + K.cy
    err = np.hypot(u - pixels[:, 0], v - pixels[:, 1])
    return np.where(z > 0, err, np.inf)


# ----------------------------------------------------------------- initialisers

def _procrustes(world: np.ndarray, cam: np.ndarray) -> Pose:
    """Rigid transform with cam ~ R world + t (Kabsch)."""
    mw, mc = world.mean(axis=0), cam.mean(axis=0)
    H = (world - mw).T @ (cam - mc)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return Pose(R, mc - R @ mw)


def _epnp(points3d: np.ndarray, pixels: np.ndarray, K: Intrinsics) -> list[Pose]:
    """Candidate poses from the EPnP control-point formulation (non-planar points)."""
    n = len(points3d)
    c0 = points3d.mean(axis=0)
    A = points3d - c0
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    ctrl = np.vstack([c0, c0 + (s[:, None] / np.sqrt(n)) * Vt])
    B = (ctrl[1:] - c0).T
    alpha = np.linalg.solve(B, A.T).T
    alpha = np.column_stack([1.0 - alpha.sum(axis=1), alpha])

    u = (pixels[:, 0] - K.cx) / K.fx
    v = (pixels[:, 1] - K.cy) / K.fy
    M = np.zeros((2 * n, 12))
    for j in range(4):
        M[0::2, 3 * j] = alpha[:, j]
        M[0::2, 3 * j + 2] = -alpha[:, j] * u
        M[1::2, 3 * j + 1] = alpha[:, j]
        M[1::2, 3 * j + 2] = -alpha[:, j] * v
    _, _, Vt = np.linalg.svd(M.T @ M)
    null = Vt[::-1][:4]  # smallest first

    pairs = [(a, b) for a in range(4) for b in range(a + 1, 4)]
    rho = np.array([np.sum((ctrl[a] - ctrl[b]) ** 2) for a, b in pairs])
    vs = null.reshape(4, 4, 3)  # kernel vector, control point, xyz
    # L maps the 10 products beta_i beta_j onto the 6 squared distances
    dv = np.array([[vs[k, a] - vs[k, b] for k in range(4)] for a, b in pairs])  # (6, 4, 3)
    prod_idx = [(i, j) for i in range(4) for j in range(i, 4)]
    L = np.zeros((6, 10))
    for c, (i, j) in enumerate(prod_idx):
        f = 1.0 if i == j else 2.0
        L[:, c] = f * np.sum(dv[:, i] * dv[:, j], axis=1)

    def from_betas(beta):
        cc = np.tensordot(beta, vs, axes=1)
        X = alpha @ cc
        if np.mean(X[:, 2]) < 0:
            X = -X
        return _procrustes(points3d, X)

    def refine(beta, iters=5):
        beta = beta.copy()
        for _ in range(iters):
            cc = np.tensordot(beta, vs, axes=1)
            d = np.array([np.sum((cc[a] - cc[b]) ** 2) for a, b in pairs])
            J = np.zeros((6, 4))
            for r, (a, b) in enumerate(pairs):
                diff = cc[a] - cc[b]
                J[r] = 2.0 * dv[r] @ diff
            step, *_ = np.linalg.lstsq(J, rho - d, rcond=None)
            beta += step
        return beta

    cands = []
    # one kernel vector
    col = [prod_idx.index((0, 0))]
    b = np.linalg.lstsq(L[:, col], rho, rcond=None)[0]
    cands.append(np.array([np.sqrt(abs(b[0])), 0, 0, 0]))
    # two kernel vectors
    col = [prod_idx.index(p) for p in [(0, 0), (0, 1), (1, 1)]]
    b = np.linalg.lstsq(L[:, col], rho, rcond=None)[0]
    b = -b if b[0] < 0 else b
    cands.append(np.array([np.sqrt(b[0]), np.sign(b[1]) * np.sqrt(abs(b[2])), 0, 0]))
    # three kernel vectors
    col = [prod_idx.index(p) for p in [(0, 0), (0, 1), (1, 1), (0, 2), (1, 2), (2, 2)]]
    b = np.linalg.lstsq(L[:, col], rho, rcond=None)[0]
    b = -b if b[0] < 0 else b
    cands.append(np.array([np.sqrt(b[0]), np.sign(b[1]) * np.sqrt(abs(b[2])),
                           np.sign(b[3]) * np.sqrt(abs(b[5])), 0]))
    out = []
    for beta in cands:
        try:
            out.append(from_betas(refine(beta)))
        except np.linalg.LinAlgError:
            continue
    return out


def _homography_init(points3d: np.ndarray, pixels: np.ndarray, K: Intrinsics) -> list[Pose]:
    """Pose from a plane-induced homography (coplanar points)."""
    c0 = points3d.mean(axis=0)
    _, _, Vt = np.linalg.svd(points3d - c0)
    e1, e2, nrm = Vt
    P = np.column_stack([(points3d - c0) @ e1, (points3d - c0) @ e2])
    x = np.column_stack([(pixels[:, 0] - K.cx) / K.fx, (pixels[:, 1] - K.cy) / K.fy])
    n = len(P)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = P
    A[0::2, 2] = 1
    A[0::2, 6:8] = -x[:, :1] * P
    A[0::2, 8] = -x[:, 0]
    A[1::2, 3:5] = P
    A[1::2, 5] = 1
    A[1::2, 6:8] = -x[:, 1:] * P
    A[1::2, 8] = -x[:, 1]
    H = np.linalg.svd(A)[2][-1].reshape(3, 3)
    lam = 2.0 / (np.linalg.norm(H[:, 0]) + np.linalg.norm(H[:, 1]))
    out = []
    for sgn in (1.0, -1.0):
        h = sgn * lam * H
        r1, r2, t = h[:, 0], h[:, 1], h[:, 2]
        Rp = orthonormalize(np.column_stack([r1, r2, np.cross(r1, r2)]))
        # plane basis -> world rotation
        Bw = np.column_stack([e1, e2, np.cross(e1, e2)])
        R = Rp @ Bw.T
        pose = Pose(R, t - R @ c0)
        if np.all((points3d @ R.T + pose.translation)[:, 2] > 0):
            out.append(pose)
    return out


def initial_poses(points3d: np.ndarray, pixels: np.ndarray, K: Intrinsics) -> list[Pose]:
    c0 = points3d.mean(axis=0)
    s = np.linalg.svd(points3d - c0, compute_uv=False)
    if s[0] == 0:
        raise DegenerateConfigurationError("all points coincide")
    if len(s) < 3 or s[2] < 1e-6 * s[0]:
        if s[1] < 1e-6 * s[0]:
            raise DegenerateConfigurationError("points are collinear")
        return _homography_init(points3d, pixels, K)
    return _epnp(points3d, pixels, K)


# ------------------------------------------------------------------ refinement

def _residuals(pose: Pose, X: np.ndarray, pixels: np.ndarray, K: Intrinsics):
    Xc = X @ pose.rotation.T + pose.translation
    z = Xc[:, 2]
    u = K.fx * Xc[:, 0] / z + K.cx
    v = K.fy * Xc[:, 1] / z + K.cy
    r = np.column_stack([u - pixels[:, 0], v - pixels[:, 1]]).reshape(-1)
    return r, Xc


def _jacobian(Xc: np.ndarray, K: Intrinsics) -> np.ndarray:
    x, y, z = Xc.T
    iz = 1.0 / z
    n = len(Xc)
    J = np.zeros((2 * n, 6))
    # d(u, v)/d Xc
    du = np.column_stack([K.fx * iz, np.zeros(n), -K.fx * x * iz * iz])
    dv = np.column_stack([np.zeros(n), K.fy * iz, -K.fy * y * iz * iz])
    # left perturbation: dXc = -[Xc]x w + dt
    skew = np.zeros((n, 3, 3))
    skew[:, 0, 1], skew[:, 0, 2] = -z, y
    skew[:, 1, 0], skew[:, 1, 2] = z, -x
    skew[:, 2, 0], skew[:, 2, 1] = -y, x
    J[0::2, :3] = -np.einsum("ni,nij->nj", du, skew)
    J[1::2, :3] = -np.einsum("ni,nij->nj", dv, skew)
    J[0::2, 3:] = du
    J[1::2, 3:] = dv
    return J


def _update(pose: Pose, step: np.ndarray) -> Pose:
    dR = Rotation.from_rotvec(step[:3]).as_matrix()
    return Pose(orthonormalize(dR @ pose.rotation), dR @ pose.translation + step[3:])


def refine_pose(pose: Pose, points3d: np.ndarray, pixels: np.ndarray, K: Intrinsics,
                max_iterations: int = 100, tol: float = 1e-10, history: list | None = None) -> Pose:
    """Damped Gauss-Newton on mean squared reprojection error.

    A step that raises the error is rejected and the damping increased, so
    the error sequence is non-increasing.
    """
    r, Xc = _residuals(pose, points3d, pixels, K)
    if np.any(Xc[:, 2] <= 0):
        raise DegenerateConfigurationError("initial pose places points behind the camera")
    err = float(np.mean(r * r))
    if history is not None:
        history.append(err)
    lam = 1e-6
    for _ in range(max_iterations):
        J = _jacobian(Xc, K)
        JtJ = J.T @ J
        if np.linalg.matrix_rank(JtJ, tol=1e-12 * max(np.trace(JtJ), 1e-300)) < 6:
            raise DegenerateConfigurationError("rank-deficient normal equations")
        g = J.T @ r
        accepted = False
        for _ in range(30):
            A = JtJ + lam * np.diag(np.diag(JtJ))
            step = -np.linalg.solve(A, g)
            cand = _update(pose, step)
            r2, Xc2 = _residuals(cand, points3d, pixels, K)
            err2 = float(np.mean(r2 * r2)) if np.all(Xc2[:, 2] > 0) else np.inf
            if err2 <= err:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
        pose, r, Xc, err = cand, r2, Xc2, err2
        lam = max(lam / 10.0, 1e-12)
        if history is not None:
            history.append(err)
        if np.linalg.norm(step) < tol:
            break
    return pose


def solve_pnp(points3d, pixels, K: Intrinsics, init: Pose | None = None,
              history: list | None = None) -> Pose:
    """Pose mapping world points into the camera that observed ``pixels``."""
    X = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    x = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if len(X) < 4 or len(X) != len(x):
        raise DegenerateConfigurationError(f"need at least 4 correspondences, got {len(X)}")
    if init is not None:
        return refine_pose(init, X, x, K, history=history)
    best, best_err = None, np.inf
    for cand in initial_poses(X, x, K):
        try:
            p = refine_pose(cand, X, x, K, max_iterations=10)
        except DegenerateConfigurationError:
            continue
        e = np.mean(reprojection_errors(p, X, x, K) ** 2)
        if e < best_err:
            best, best_err = p, e
    if best is None:
        raise DegenerateConfigurationError("no initial pose keeps the points in front of the camera")
    return refine_pose(best, X, x, K, history=history)


def _minimal_pose(X: np.ndarray, x: np.ndarray, K: Intrinsics) -> Pose | None:
    try:
        cands = initial_poses(X, x, K)
    except (DegenerateConfigurationError, np.linalg.LinAlgError):
        return None
    best, best_err = None, np.inf
    for p in cands:
        e = np.sum(reprojection_errors(p, X, x, K) ** 2)
        if e < best_err:
            best, best_err = p, e
    return best


def solve_pnp_ransac(points3d, pixels, K: Intrinsics, cfg: RansacConfig = RansacConfig()):
    """Robust PnP: seeded 4-point hypotheses, inlier count scoring, final refit.

    Returns (pose, inlier mask). Terminates early once the running inlier
    ratio implies ``cfg.confidence`` of having drawn a clean sample.
    """
    X = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    x = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = len(X)
    if n < 4:
        raise DegenerateConfigurationError(f"need at least 4 correspondences, got {n}")
    rng = np.random.default_rng(cfg.seed)
    best_pose, best_mask, best_count = None, None, -1
    needed = cfg.iterations
    it = 0
    while it < min(needed, cfg.iterations):
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        pose = _minimal_pose(X[idx], x[idx], K)
        if pose is None:
            continue
        mask = reprojection_errors(pose, X, x, K) < cfg.inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_pose, best_mask, best_count = pose, mask, count
            w = count / n
            if w >= 1.0:
                needed = 0
            elif w > 0:
                needed = int(np.ceil(np.log(1 - cfg.confidence) / np.log(1 - w ** 4)))
    if best_count < max(cfg.min_inliers, 4):
        raise RobustFailureError(f"best hypothesis has {max(best_count, 0)} inliers, "
                                 f"need {cfg.min_inliers}")
    pose, mask = best_pose, best_mask
    # refit on the inliers, then once more on the refreshed inlier set
    for _ in range(2):
        try:
            pose = solve_pnp(X[mask], x[mask], K, init=pose)
        except DegenerateConfigurationError:
            break
        new_mask = reprojection_errors(pose, X, x, K) < cfg.inlier_threshold
        if new_mask.sum() < max(cfg.min_inliers, 4) or np.array_equal(new_mask, mask):
            break
        mask = new_mask
    return pose, mask


def pair_correspondences(depth_a: np.ndarray, mask_a: np.ndarray, pixel_a: np.ndarray, K: Intrinsics):
    """Back-project ``pixel_a`` with bilinear depth; returns (points, ok)."""
    fp = bilinear(pixel_a[:, 0], pixel_a[:, 1], mask_a & (depth_a > 0))
    z = fp.sample(depth_a)
    ok = fp.valid & (z > 0)
    pts = np.column_stack([z * (pixel_a[:, 0] - K.cx) / K.fx, z * (pixel_a[:, 1] - K.cy) / K.fy, z])
    return pts, ok


def derive_trajectory(depths, tracks, K: Intrinsics, cfg: RansacConfig = RansacConfig()) -> Trajectory:
    """Chain adjacent-frame PnP-RANSAC solves into a camera-to-world trajectory.

    Frame 0 is the identity. A pair whose solve fails falls back to the
    identity relative pose and is listed in ``Trajectory.gaps``.
    """
    values = depths.values if hasattr(depths, "values") else np.asarray(depths, dtype=np.float64)
    masks = depths.mask if hasattr(depths, "mask") else np.ones(values.shape, dtype=bool)
    T = len(values)
    poses = [Pose.identity()]
    gaps = []
    for a in range(T - 1):
        sel = (tracks.frame_a == a) & (tracks.frame_b == a + 1)
        rel = None
        if sel.sum() >= 4:
            pts, ok = pair_correspondences(values[a], masks[a], tracks.pixel_a[sel], K)
            pix = tracks.pixel_b[sel][ok]
            try:
                rel, _ = solve_pnp_ransac(pts[ok], pix, K, cfg)
            except (RobustFailureError, DegenerateConfigurationError) as exc:
                log.warning("pose for frames %d->%d failed: %s", a, a + 1, exc)
        if rel is None:
            gaps.append(a)
            rel = Pose.identity()
        # rel maps camera a into camera a+1
        poses.append(poses[-1] @ rel.inverse())
    return Trajectory(poses, gaps=gaps)
