"""Batched torch counterparts of the scalar geometry in `core`.

All functions keep autograd graphs intact and default to float64; the
scalar numpy routines serve as their independent oracle in the tests.
"""

from __future__ import annotations

import torch

from .core import Camera, quat_to_matrix


def quat_normalize_t(q: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Rows with norm below eps fall back to the identity quaternion."""
    n = torch.linalg.norm(q, dim=-1, keepdim=True)
    identity = torch.zeros_like(q)
    identity[..., 0] = 1.0
    safe = torch.where(n > eps, q / torch.clamp(n, min=eps), identity)
    return safe


def quat_to_matrix_t(q: torch.Tensor) -> torch.Tensor:
    """(..., 4) unit quaternions -> (..., 3, 3) rotation matrices."""
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1)
    return torch.stack([row0, row1, row2], -2)


def quat_multiply_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], -1)


def quat_rotate_t(q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Rotate (..., 3) vectors by (..., 4) quaternions."""
    return (quat_to_matrix_t(q) @ v.unsqueeze(-1)).squeeze(-1)


class CameraTensors:
    """Camera intrinsics/extrinsics staged as torch tensors."""

    def __init__(self, camera: Camera, dtype=torch.float64):
        self.camera = camera
        self.rot = torch.as_tensor(quat_to_matrix(camera.world_to_cam.rotation), dtype=dtype)
        self.trans = torch.as_tensor(camera.world_to_cam.translation, dtype=dtype)
        self.focal = float(camera.focal)
        self.pp = torch.as_tensor(camera.principal_point, dtype=dtype)
        self.width = camera.width
        self.height = camera.height
        self.dtype = dtype

    def world_to_cam_points(self, pts: torch.Tensor) -> torch.Tensor:
        return pts @ self.rot.T + self.trans

    def project_points(self, pts: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(N, 3) world points -> ((N, 2) continuous pixels, (N,) depths)."""
        pc = self.world_to_cam_points(pts)
        z = pc[:, 2]
        px = self.pp + self.focal * pc[:, :2] / z.unsqueeze(-1)
        return px, z

    def unproject_pixels(self, px: torch.Tensor, depth: torch.Tensor) -> torch.Tensor:
        """(N, 2) continuous pixels + (N,) depths -> (N, 3) world points."""
        ray = torch.cat([(px - self.pp) / self.focal,
                         torch.ones_like(depth).unsqueeze(-1)], dim=-1)
        cam_pts = ray * depth.unsqueeze(-1)
        return (cam_pts - self.trans) @ self.rot
