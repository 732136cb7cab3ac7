"""Pose registration: Perspective-n-Point from 2D-3D correspondences (DLT
initialization, Gauss-Newton refinement, RANSAC outer loop) and median-ratio
depth scale alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Camera, RigidPose, matrix_to_quat, quat_to_matrix


class PnPError(ValueError):
    pass


@dataclass
class RansacParams:
    iterations: int = 200
    inlier_px: float = 2.0
    seed: int = 0


def _normalized(points_px: np.ndarray, camera: Camera) -> np.ndarray:
    return (points_px - camera.principal_point) / camera.focal


def _dlt(pts_n: np.ndarray, pts_3d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Direct linear transform for [R|t] from normalized pixels, >= 6 points."""
    n = len(pts_n)
    a = np.zeros((2 * n, 12))
    for i, ((u, v), p) in enumerate(zip(pts_n, pts_3d)):
        ph = np.concatenate([p, [1.0]])
        a[2 * i, 0:4] = ph
        a[2 * i, 8:12] = -u * ph
        a[2 * i + 1, 4:8] = ph
        a[2 * i + 1, 8:12] = -v * ph
    _, _, vt = np.linalg.svd(a)
    pmat = vt[-1].reshape(3, 4)
    # fix the projective sign so points land in front of the camera
    depths = pts_3d @ pmat[2, :3] + pmat[2, 3]
    if np.median(depths) < 0:
        pmat = -pmat
    u_, s_, vt_ = np.linalg.svd(pmat[:, :3])
    det = np.linalg.det(u_ @ vt_)
    r = u_ @ np.diag([1.0, 1.0, det]) @ vt_
    t = pmat[:, 3] / np.mean(s_)
    return r, t


def _reproj_residuals(r, t, pts_n, pts_3d):
    pc = pts_3d @ r.T + t
    z = pc[:, 2]
    safe_z = np.where(np.abs(z) < 1e-12, 1e-12, z)
    proj = pc[:, :2] / safe_z[:, None]
    res = (proj - pts_n).ravel()
    res[np.repeat(z <= 0, 2)] = 1e6  # behind-camera points can never be inliers
    return res, pc


def _so3_exp(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3)
    k = w / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)


def _gauss_newton(r, t, pts_n, pts_3d, iters: int = 12):
    for _ in range(iters):
        res, pc = _reproj_residuals(r, t, pts_n, pts_3d)
        n = len(pts_3d)
        jac = np.zeros((2 * n, 6))
        x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
        z = np.where(np.abs(z) < 1e-12, 1e-12, z)
        iz, iz2 = 1.0 / z, 1.0 / z**2
        # d(proj)/d(cam point)
        du = np.stack([iz, np.zeros(n), -x * iz2], axis=1)
        dv = np.stack([np.zeros(n), iz, -y * iz2], axis=1)
        # cam point w.r.t. [rotation (left-perturbation), translation]
        for i in range(n):
            px = np.array([[0, pc[i, 2], -pc[i, 1]],
                           [-pc[i, 2], 0, pc[i, 0]],
                           [pc[i, 1], -pc[i, 0], 0]])
            jac[2 * i, :3] = du[i] @ px
            jac[2 * i, 3:] = du[i]
            jac[2 * i + 1, :3] = dv[i] @ px
            jac[2 * i + 1, 3:] = dv[i]
        ok = np.abs(res) < 1e5
        h = jac[ok].T @ jac[ok] + 1e-12 * np.eye(6)
        g = jac[ok].T @ res[ok]
        try:
            delta = -np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            break
        r = _so3_exp(delta[:3]) @ r
        t = t + delta[3:]
        if np.linalg.norm(delta) < 1e-14:
            break
    return r, t


def solve_pnp(correspondences, camera_intrinsics: Camera,
              ransac: RansacParams | None = None) -> tuple[RigidPose, np.ndarray]:
    """Estimate the world-to-camera pose from (pixel, 3D point) pairs.

    Returns the refined pose and the inlier index set. Raises PnPError for
    fewer than 6 points or degenerate configurations.
    """
    ransac = ransac or RansacParams()
    pts_px = np.array([np.asarray(c[0], dtype=np.float64) for c in correspondences])
    pts_3d = np.array([np.asarray(c[1], dtype=np.float64) for c in correspondences])
    n = len(pts_px)
    if n < 6:
        raise PnPError(f"need at least 6 correspondences, got {n}")
    spread = np.linalg.svd(pts_3d - pts_3d.mean(axis=0), compute_uv=False)
    if spread[1] < 1e-9 * max(spread[0], 1.0):
        raise PnPError("degenerate correspondence geometry (collinear points)")

    pts_n = _normalized(pts_px, camera_intrinsics)
    thr_n = ransac.inlier_px / camera_intrinsics.focal
    rng = np.random.default_rng(ransac.seed)

    best_inliers = np.zeros(n, dtype=bool)
    for _ in range(ransac.iterations):
        sample = rng.choice(n, size=6, replace=False)
        try:
            r, t = _dlt(pts_n[sample], pts_3d[sample])
        except np.linalg.LinAlgError:
            continue
        res, _ = _reproj_residuals(r, t, pts_n, pts_3d)
        err = np.linalg.norm(res.reshape(-1, 2), axis=1)
        inliers = err < thr_n
        if inliers.sum() > best_inliers.sum():
            best_inliers = inliers
    if best_inliers.sum() < 6:
        raise PnPError("RANSAC found no 6-point consensus within the threshold")

    r, t = _dlt(pts_n[best_inliers], pts_3d[best_inliers])
    r, t = _gauss_newton(r, t, pts_n[best_inliers], pts_3d[best_inliers])
    # final inlier set under the refined pose
    res, _ = _reproj_residuals(r, t, pts_n, pts_3d)
    err = np.linalg.norm(res.reshape(-1, 2), axis=1)
    inliers = err < thr_n
    if inliers.sum() >= 6:
        r, t = _gauss_newton(r, t, pts_n[inliers], pts_3d[inliers])
    pose = RigidPose(matrix_to_quat(r), t)
    return pose, np.nonzero(inliers)[0]


def reprojection_rmse(pose: RigidPose, correspondences, camera: Camera,
                      indices=None) -> float:
    pts_px = np.array([np.asarray(c[0], dtype=np.float64) for c in correspondences])
    pts_3d = np.array([np.asarray(c[1], dtype=np.float64) for c in correspondences])
    if indices is not None:
        pts_px, pts_3d = pts_px[indices], pts_3d[indices]
    r = quat_to_matrix(pose.rotation)
    res, _ = _reproj_residuals(r, pose.translation,
                               _normalized(pts_px, camera), pts_3d)
    err_px = np.linalg.norm(res.reshape(-1, 2), axis=1) * camera.focal
    return float(np.sqrt(np.mean(err_px**2)))


def align_scale(depth_a, depth_b) -> float:
    """Median of elementwise depth ratios b/a."""
    a = np.asarray(depth_a, dtype=np.float64)
    b = np.asarray(depth_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("need equal-length 1D samples")
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("depths must be positive")
    return float(np.median(b / a))
