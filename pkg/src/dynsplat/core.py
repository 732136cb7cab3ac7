"""Geometry primitives: quaternions, rigid poses, pinhole cameras, Gaussians.

Everything here is a plain numpy value type in double precision. Pixel
coordinates are continuous, (x, y) = (column, row), and the center of the
integer pixel (i, j) sits at (i + 0.5, j + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

QUAT_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

# pixel-center offset shared by project/unproject and the rasterizer
PIXEL_CENTER = 0.5


def quat_normalize(q) -> tuple[np.ndarray, bool]:
    """Return (unit quaternion, degenerate flag). Zero input falls back to identity."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        return QUAT_IDENTITY.copy(), True
    return q / n, False


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product a ⊗ b, both [w, x, y, z]."""
    aw, ax, ay, az = np.asarray(a, dtype=np.float64)
    bw, bx, by, bz = np.asarray(b, dtype=np.float64)
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q) -> np.ndarray:
    """3x3 rotation matrix of a unit quaternion [w, x, y, z]."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        return QUAT_IDENTITY.copy()
    axis = axis / n
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


def quat_rotate(q, v) -> np.ndarray:
    """Rotate vector v by quaternion q (normalized internally if needed)."""
    q, _ = quat_normalize(q)
    return quat_to_matrix(q) @ np.asarray(v, dtype=np.float64)


@dataclass(frozen=True)
class RigidPose:
    """SE(3) element: x -> R(rotation) x + translation."""

    rotation: np.ndarray = field(default_factory=lambda: QUAT_IDENTITY.copy())
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError("rotation quaternion must be unit length to 1e-9")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    def apply(self, p) -> np.ndarray:
        return quat_rotate(self.rotation, p) + self.translation

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self ∘ other: apply `other` first."""
        q, _ = quat_normalize(quat_multiply(self.rotation, other.rotation))
        return RigidPose(q, self.apply(other.translation))

    def inverse(self) -> "RigidPose":
        qc = quat_conjugate(self.rotation)
        return RigidPose(qc, -quat_rotate(qc, self.translation))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose()


class ProjectResult(NamedTuple):
    pixel: np.ndarray
    depth: float
    valid: bool  # False when the point is behind or on the camera plane


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics in pixels plus a world-to-camera pose."""

    focal: float
    principal_point: np.ndarray
    resolution: tuple[int, int]  # (width, height)
    world_to_cam: RigidPose = field(default_factory=RigidPose.identity)

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        w, h = self.resolution
        if w < 1 or h < 1:
            raise ValueError("resolution components must be >= 1")
        pp = np.asarray(self.principal_point, dtype=np.float64)
        object.__setattr__(self, "principal_point", pp)
        object.__setattr__(self, "resolution", (int(w), int(h)))
        r = quat_to_matrix(self.world_to_cam.rotation)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    def project(self, point_world) -> ProjectResult:
        """World point -> (continuous pixel, camera-space depth)."""
        pc = self.world_to_cam.apply(point_world)
        z = float(pc[2])
        if abs(z) < 1e-12:
            return ProjectResult(np.full(2, np.nan), z, False)
        px = self.principal_point + self.focal * pc[:2] / z
        return ProjectResult(px, z, z > 0.0)

    def unproject(self, pixel, depth: float) -> np.ndarray:
        """Continuous pixel + positive depth -> world point."""
        if depth <= 0:
            raise ValueError(f"depth must be positive, got {depth}")
        pixel = np.asarray(pixel, dtype=np.float64)
        ray = np.array([
            (pixel[0] - self.principal_point[0]) / self.focal,
            (pixel[1] - self.principal_point[1]) / self.focal,
            1.0,
        ])
        return self.world_to_cam.inverse().apply(ray * depth)

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.world_to_cam.inverse().translation


def look_at_pose(eye, target, up=(0.0, 1.0, 0.0)) -> RigidPose:
    """World-to-camera pose with +z looking from eye toward target."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("eye and target coincide")
    fwd = fwd / n
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        # up parallel to view direction; pick any perpendicular fallback
        up = np.array([1.0, 0.0, 0.0]) if abs(fwd[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])  # rows: camera x, y, z in world coords
    return RigidPose(matrix_to_quat(r), -r @ eye)


def matrix_to_quat(r) -> np.ndarray:
    """Unit quaternion [w, x, y, z] of a rotation matrix (Shepperd's method)."""
    r = np.asarray(r, dtype=np.float64)
    t = np.trace(r)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s,
                      (r[1, 0] - r[0, 1]) / s])
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        q = np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s,
                      (r[0, 2] + r[2, 0]) / s])
    elif r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        q = np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s,
                      (r[1, 2] + r[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        q = np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s,
                      (r[1, 2] + r[2, 1]) / s, 0.25 * s])
    q, _ = quat_normalize(q)
    return q


@dataclass(frozen=True)
class Gaussian3D:
    """One anisotropic 3D Gaussian primitive.

    mean in meters, scale per-axis standard deviations, unit rotation
    quaternion, opacity/foreground probability in [0, 1], plain RGB color
    (degree-0 only), and a unit-norm feature embedding.
    """

    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: QUAT_IDENTITY.copy())
    opacity: float = 1.0
    color: np.ndarray = field(default_factory=lambda: np.ones(3))
    fg_prob: float = 1.0
    feature: np.ndarray = field(default_factory=lambda: np.array([1.0]))

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        scale = np.asarray(self.scale, dtype=np.float64)
        if np.any(scale <= 0):
            raise ValueError("scale components must be positive")
        q = np.asarray(self.rotation, dtype=np.float64)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError("rotation quaternion must be unit length to 1e-9")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity must be in [0, 1]")
        if not 0.0 <= self.fg_prob <= 1.0:
            raise ValueError("fg_prob must be in [0, 1]")
        f = np.asarray(self.feature, dtype=np.float64)
        if abs(np.linalg.norm(f) - 1.0) > 1e-6:
            raise ValueError("feature must be unit norm to 1e-6")
        color = np.clip(np.asarray(self.color, dtype=np.float64), 0.0, 1.0)
        for name, val in (("mean", mean), ("scale", scale), ("rotation", q),
                          ("color", color), ("feature", f)):
            object.__setattr__(self, name, val)

    def covariance(self) -> np.ndarray:
        r = quat_to_matrix(self.rotation)
        return r @ np.diag(self.scale**2) @ r.T
