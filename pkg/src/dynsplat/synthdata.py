"""Synthetic ground-truth scenes: articulated piecewise-rigid objects sampled
as dense Gaussian surfaces, camera trajectories, and exact depth/mask/track
supervision. Everything the real pipeline would take from upstream estimators
is generated here noise-free (with optional jitter knobs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .core import (QUAT_IDENTITY, Camera, RigidPose, look_at_pose,
                   quat_from_axis_angle, quat_rotate)
from .renderer import GaussianBatch, RenderOptions, splat_forward

FEATURE_DIM = 8
GT_OPACITY = 0.98
GEN_RENDER_OPTIONS = RenderOptions(cull_sigma=6.0)


def smoothstep(u: float) -> float:
    u = min(1.0, max(0.0, u))
    return u * u * (3 - 2 * u)


@dataclass
class KeyframeTrack:
    """Rigid pose track over normalized time [0, 1]: slerp between keyframe
    rotations and lerp between translations, eased per segment."""

    times: np.ndarray
    poses: list[RigidPose]
    easing: str = "smoothstep"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if len(self.times) != len(self.poses) or len(self.times) < 1:
            raise ValueError("times and poses must align and be nonempty")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("keyframe times must be strictly increasing")

    @staticmethod
    def static() -> "KeyframeTrack":
        return KeyframeTrack(times=np.array([0.0]), poses=[RigidPose.identity()])

    def pose_at(self, that: float) -> RigidPose:
        ts = self.times
        if len(self.poses) == 1 or that <= ts[0]:
            return self.poses[0]
        if that >= ts[-1]:
            return self.poses[-1]
        seg = int(np.searchsorted(ts, that, side="right") - 1)
        u = (that - ts[seg]) / (ts[seg + 1] - ts[seg])
        if self.easing == "smoothstep":
            u = smoothstep(u)
        return _pose_interp(self.poses[seg], self.poses[seg + 1], u)


def _so3_hat(w: np.ndarray) -> np.ndarray:
    return np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])


def _se3_log(pose: RigidPose) -> tuple[np.ndarray, np.ndarray]:
    from .core import quat_to_matrix
    r = quat_to_matrix(pose.rotation)
    cos_theta = max(-1.0, min(1.0, 0.5 * (np.trace(r) - 1.0)))
    theta = math.acos(cos_theta)
    if theta < 1e-9:
        return np.zeros(3), pose.translation.copy()
    w = theta / (2 * math.sin(theta)) * np.array(
        [r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    wh = _so3_hat(w)
    half = 0.5 * theta
    v_inv = (np.eye(3) - 0.5 * wh
             + (1.0 - half * math.cos(half) / math.sin(half)) / theta**2 * (wh @ wh))
    return w, v_inv @ pose.translation


def _se3_exp(w: np.ndarray, v: np.ndarray) -> RigidPose:
    theta = float(np.linalg.norm(w))
    if theta < 1e-9:
        return RigidPose(QUAT_IDENTITY.copy(), v.copy())
    axis = w / theta
    wh = _so3_hat(w)
    vmat = (np.eye(3) + (1 - math.cos(theta)) / theta**2 * wh
            + (theta - math.sin(theta)) / theta**3 * (wh @ wh))
    return RigidPose(quat_from_axis_angle(axis, theta), vmat @ v)


def _pose_interp(a: RigidPose, b: RigidPose, u: float) -> RigidPose:
    """SE(3) geodesic (screw motion): a rotation about a fixed pivot
    interpolates as the exact rotation about that pivot."""
    rel = a.inverse().compose(b)
    w, v = _se3_log(rel)
    return a.compose(_se3_exp(u * w, u * v))


def rotation_about_pivot(axis, angle: float, pivot) -> RigidPose:
    """Rigid pose rotating about an axis through a world-space pivot point."""
    q = quat_from_axis_angle(axis, angle)
    pivot = np.asarray(pivot, dtype=np.float64)
    return RigidPose(q, pivot - quat_rotate(q, pivot))


@dataclass
class RigidPart:
    """Dense Gaussian surface sampling of one rigid body with its motion."""

    points: np.ndarray          # (M, 3) rest positions, world frame at t=1
    colors: np.ndarray          # (M, 3)
    sample_scale: float         # isotropic Gaussian scale
    feature_index: int
    track: KeyframeTrack = field(default_factory=KeyframeTrack.static)
    parent: int | None = None   # chained motion: world = parent_world o own


@dataclass
class BlendBand:
    """Linear blend of two adjacent parts' poses within a radius of a joint."""

    part_a: int
    part_b: int
    pivot: np.ndarray
    radius: float


@dataclass
class ArticulatedObject:
    parts: list[RigidPart]
    blend: BlendBand | None = None
    feature_dim: int = FEATURE_DIM

    def n_points(self) -> int:
        return sum(p.points.shape[0] for p in self.parts)

    def part_pose(self, part_idx: int, that: float) -> RigidPose:
        part = self.parts[part_idx]
        pose = part.track.pose_at(that)
        if part.parent is not None:
            pose = self.part_pose(part.parent, that).compose(pose)
        return pose

    def _blend_weights(self) -> np.ndarray | None:
        """Per-point weight of the *other* part's pose, frozen at rest."""
        if self.blend is None:
            return None
        w = np.zeros(self.n_points())
        offset = 0
        for i, part in enumerate(self.parts):
            if i in (self.blend.part_a, self.blend.part_b):
                d = np.linalg.norm(part.points - self.blend.pivot, axis=1)
                w[offset:offset + len(part.points)] = \
                    0.5 * np.maximum(0.0, 1.0 - d / self.blend.radius)
            offset += len(part.points)
        return w

    def positions_at(self, t: int, total: int) -> np.ndarray:
        """(N, 3) world positions of every sample point at timestep t."""
        that = 0.0 if total == 1 else (t - 1) / (total - 1)
        mats = [self.part_pose(i, that).matrix() for i in range(len(self.parts))]
        out = []
        for i, part in enumerate(self.parts):
            hom = np.concatenate([part.points, np.ones((len(part.points), 1))], axis=1)
            out.append(hom @ mats[i][:3].T)
        pos = np.concatenate(out)
        bw = self._blend_weights()
        if bw is not None:
            other = {self.blend.part_a: self.blend.part_b,
                     self.blend.part_b: self.blend.part_a}
            offset = 0
            for i, part in enumerate(self.parts):
                m = len(part.points)
                if i in other and bw[offset:offset + m].any():
                    hom = np.concatenate([part.points, np.ones((m, 1))], axis=1)
                    alt = hom @ mats[other[i]][:3].T
                    w = bw[offset:offset + m, None]
                    pos[offset:offset + m] = (1 - w) * pos[offset:offset + m] + w * alt
                offset += m
        return pos

    def static_fields(self):
        colors = np.concatenate([p.colors for p in self.parts])
        scales = np.concatenate([np.full(len(p.points), p.sample_scale)
                                 for p in self.parts])
        feats = np.zeros((self.n_points(), self.feature_dim))
        part_ids = np.zeros(self.n_points(), dtype=np.int64)
        offset = 0
        for i, part in enumerate(self.parts):
            m = len(part.points)
            feats[offset:offset + m, part.feature_index % self.feature_dim] = 1.0
            part_ids[offset:offset + m] = i
            offset += m
        return colors, scales, feats, part_ids

    def gaussians_at(self, t: int, total: int) -> GaussianBatch:
        pos = self.positions_at(t, total)
        colors, scales, feats, _ = self.static_fields()
        n = len(pos)
        quats = torch.zeros(n, 4, dtype=torch.float64)
        quats[:, 0] = 1.0
        return GaussianBatch(
            means=torch.as_tensor(pos),
            scales=torch.as_tensor(np.repeat(scales[:, None], 3, axis=1)),
            quats=quats,
            opacities=torch.full((n,), GT_OPACITY, dtype=torch.float64),
            colors=torch.as_tensor(colors),
            features=torch.as_tensor(feats),
            fg_probs=torch.ones(n, dtype=torch.float64))

    def rescaled(self, factor: float) -> "ArticulatedObject":
        parts = []
        for p in self.parts:
            track = KeyframeTrack(
                times=p.track.times.copy(),
                poses=[RigidPose(ps.rotation.copy(), ps.translation * factor)
                       for ps in p.track.poses],
                easing=p.track.easing)
            parts.append(replace(p, points=p.points * factor,
                                 sample_scale=p.sample_scale * factor, track=track))
        blend = None
        if self.blend is not None:
            blend = BlendBand(self.blend.part_a, self.blend.part_b,
                              self.blend.pivot * factor, self.blend.radius * factor)
        return ArticulatedObject(parts=parts, blend=blend, feature_dim=self.feature_dim)


def normalize_object(obj: ArticulatedObject) -> ArticulatedObject:
    """Scale the object so its rest bounding box's longest edge is 1.0."""
    pts = np.concatenate([p.points for p in obj.parts])
    edge = float(np.max(pts.max(axis=0) - pts.min(axis=0)))
    return obj.rescaled(1.0 / edge)


# ---------------------------------------------------------------------------
# primitive surface samplings


def sample_sphere(center, radius: float, spacing: float) -> np.ndarray:
    n = max(16, int(round(4 * math.pi * radius**2 / spacing**2)))
    golden = (1 + math.sqrt(5)) / 2
    k = np.arange(n)
    z = 1 - (2 * k + 1) / n
    r = np.sqrt(np.maximum(0.0, 1 - z * z))
    phi = 2 * math.pi * k / golden
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return np.asarray(center) + radius * pts


def sample_box(center, half, spacing: float) -> np.ndarray:
    half = np.asarray(half, dtype=np.float64)
    pts = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        nu = max(2, int(round(2 * half[u] / spacing)) + 1)
        nv = max(2, int(round(2 * half[v] / spacing)) + 1)
        us = np.linspace(-half[u], half[u], nu)
        vs = np.linspace(-half[v], half[v], nv)
        uu, vv = np.meshgrid(us, vs, indexing="ij")
        for sign in (-1.0, 1.0):
            face = np.zeros((nu * nv, 3))
            face[:, u] = uu.ravel()
            face[:, v] = vv.ravel()
            face[:, axis] = sign * half[axis]
            pts.append(face)
    pts = np.concatenate(pts)
    # drop duplicated edge/corner samples
    _, keep = np.unique(np.round(pts / (spacing * 0.25)).astype(np.int64),
                        axis=0, return_index=True)
    return np.asarray(center) + pts[np.sort(keep)]


def sample_capsule(p0, p1, radius: float, spacing: float) -> np.ndarray:
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    axis = axis / length
    # orthonormal frame around the axis
    ref = np.array([1.0, 0, 0]) if abs(axis[0]) < 0.9 else np.array([0, 1.0, 0])
    e1 = np.cross(axis, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    pts = []
    n_rings = max(2, int(round(length / spacing)) + 1)
    n_side = max(6, int(round(2 * math.pi * radius / spacing)))
    for i in range(n_rings):
        c = p0 + axis * (length * i / (n_rings - 1))
        ang = 2 * math.pi * (np.arange(n_side) + 0.5 * (i % 2)) / n_side
        ring = c + radius * (np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2)
        pts.append(ring)
    for cap_center, sign in ((p0, -1.0), (p1, 1.0)):
        hemi = sample_sphere(np.zeros(3), radius, spacing)
        keep = hemi @ axis * sign > radius * 0.05
        pts.append(cap_center + hemi[keep])
    return np.concatenate(pts)


def _texture_colors(points: np.ndarray, base: np.ndarray, freq: float = 9.0) -> np.ndarray:
    """Smooth per-point albedo modulation so photometric losses see gradients."""
    phases = np.array([[1.0, 0.7, 0.3], [0.2, 1.1, 0.6], [0.8, 0.4, 1.2]])
    mod = 0.5 + 0.5 * np.sin(freq * points @ phases.T)
    return np.clip(base * (0.55 + 0.45 * mod), 0.03, 0.97)


# ---------------------------------------------------------------------------
# built-in objects


def _rigid_rot_object(spacing: float) -> ArticulatedObject:
    half = np.array([0.5, 0.3, 0.2])
    pts = sample_box([0, 0, 0], half, spacing)
    track = KeyframeTrack(
        times=np.array([0.0, 1.0]),
        poses=[RigidPose.identity(),
               rotation_about_pivot([0, 1, 0], math.pi / 2, [0, 0, 0])])
    part = RigidPart(points=pts, colors=_texture_colors(pts, np.array([0.85, 0.45, 0.25])),
                     sample_scale=spacing * 0.7, feature_index=0, track=track)
    return normalize_object(ArticulatedObject(parts=[part]))


def _pendulum_object(spacing: float) -> ArticulatedObject:
    anchor_pts = sample_box([0, 0.45, 0], [0.45, 0.1, 0.1], spacing)
    pivot = np.array([0.0, 0.3, 0.0])
    arm_pts = sample_capsule([0, 0.3, 0], [0, -0.45, 0], 0.12, spacing)
    swing = []
    for that, ang in ((0.0, 0.0), (0.25, math.pi / 4), (0.5, 0.0),
                      (0.75, -math.pi / 4), (1.0, 0.0)):
        swing.append((that, rotation_about_pivot([0, 0, 1], ang, pivot)))
    track = KeyframeTrack(times=np.array([s[0] for s in swing]),
                          poses=[s[1] for s in swing])
    parts = [
        RigidPart(points=anchor_pts,
                  colors=_texture_colors(anchor_pts, np.array([0.3, 0.5, 0.9])),
                  sample_scale=spacing * 0.7, feature_index=0),
        RigidPart(points=arm_pts,
                  colors=_texture_colors(arm_pts, np.array([0.9, 0.75, 0.2])),
                  sample_scale=spacing * 0.7, feature_index=1, track=track),
    ]
    blend = BlendBand(part_a=0, part_b=1, pivot=pivot, radius=0.1)
    return normalize_object(ArticulatedObject(parts=parts, blend=blend))


def _static_box_object(spacing: float) -> ArticulatedObject:
    half = np.array([0.5, 0.35, 0.25])
    pts = sample_box([0, 0, 0], half, spacing)
    part = RigidPart(points=pts, colors=_texture_colors(pts, np.array([0.5, 0.7, 0.4])),
                     sample_scale=spacing * 0.7, feature_index=0)
    return normalize_object(ArticulatedObject(parts=[part]))


def _walker_object(spacing: float) -> ArticulatedObject:
    torso_pts = sample_box([0, 0.35, 0], [0.4, 0.15, 0.12], spacing)
    hip = np.array([0.0, 0.2, 0.0])
    knee = np.array([0.0, -0.25, 0.0])
    thigh_pts = sample_capsule([0, 0.2, 0], [0, -0.25, 0], 0.1, spacing)
    shin_pts = sample_capsule([0, -0.25, 0], [0, -0.62, 0], 0.08, spacing)

    def swing_track(pivot, amp, phase):
        # angle zeroed at the first frame so the canonical pose is the rest pose
        times = np.linspace(0.0, 1.0, 9)
        bias = math.sin(2 * math.pi * phase)
        poses = [rotation_about_pivot(
            [0, 0, 1], amp * (math.sin(2 * math.pi * (u + phase)) - bias), pivot)
            for u in times]
        return KeyframeTrack(times=times, poses=poses)

    parts = [
        RigidPart(points=torso_pts,
                  colors=_texture_colors(torso_pts, np.array([0.4, 0.8, 0.4])),
                  sample_scale=spacing * 0.7, feature_index=0),
        RigidPart(points=thigh_pts,
                  colors=_texture_colors(thigh_pts, np.array([0.85, 0.35, 0.55])),
                  sample_scale=spacing * 0.7, feature_index=1,
                  track=swing_track(hip, math.pi / 7, 0.0)),
        RigidPart(points=shin_pts,
                  colors=_texture_colors(shin_pts, np.array([0.35, 0.55, 0.9])),
                  sample_scale=spacing * 0.7, feature_index=2, parent=1,
                  track=swing_track(knee, math.pi / 8, 0.25)),
    ]
    return normalize_object(ArticulatedObject(parts=parts))


# ---------------------------------------------------------------------------
# scene assembly


@dataclass
class SceneSpec:
    name: str = "rigid-rot"
    resolution: tuple[int, int] = (64, 64)
    timesteps: int = 30
    prescan_views: int = 12
    track_count: int = 96
    seed: int = 0
    noise_tracks: float = 0.0   # pixel sigma on 2D track targets
    noise_depth: float = 0.0    # relative sigma on depth maps
    spacing: float = 0.05       # surface sample spacing before normalization
    camera_motion: float = 1.0  # scale on the dynamic camera's orbit arc

    def to_dict(self) -> dict:
        return {"name": self.name, "resolution": list(self.resolution),
                "timesteps": self.timesteps, "prescan_views": self.prescan_views,
                "track_count": self.track_count, "seed": self.seed,
                "noise_tracks": self.noise_tracks, "noise_depth": self.noise_depth,
                "spacing": self.spacing, "camera_motion": self.camera_motion}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["resolution"] = tuple(d.get("resolution", (64, 64)))
        return cls(**d)


@dataclass
class FrameObs:
    image: np.ndarray   # (H, W, 3) in [0, 1]
    depth: np.ndarray   # (H, W), surface depth where mask, else 0
    mask: np.ndarray    # (H, W) bool
    camera: Camera


@dataclass
class SceneSequence:
    kind: str           # prescan | dynamic | test
    frames: list[FrameObs]


@dataclass
class TrackSet:
    query_px: np.ndarray     # (K, 2) frame-1 pixels
    query_p3d: np.ndarray    # (K, 3)
    query_part: np.ndarray   # (K,)
    px: np.ndarray           # (T, K, 2)
    p3d: np.ndarray          # (T, K, 3)
    visible: np.ndarray      # (T, K) bool


BUILTINS = {
    "rigid-rot": _rigid_rot_object,
    "pendulum": _pendulum_object,
    "walker": _walker_object,
    "static-box": _static_box_object,
}


def builtin_scenes() -> list[str]:
    return sorted(BUILTINS)


def build_object(name: str, spacing: float = 0.05) -> ArticulatedObject:
    if name not in BUILTINS:
        raise ValueError(f"unknown scene {name!r}; have {builtin_scenes()}")
    return BUILTINS[name](spacing)


def _orbit_camera(center, radius, azimuth, elevation, focal, resolution) -> Camera:
    eye = center + radius * np.array([
        math.cos(elevation) * math.sin(azimuth),
        math.sin(elevation),
        math.cos(elevation) * math.cos(azimuth)])
    w, h = resolution
    return Camera(focal=focal, principal_point=np.array([w / 2, h / 2]),
                  resolution=resolution, world_to_cam=look_at_pose(eye, center))


def _render_frame(batch: GaussianBatch, camera: Camera, rng=None,
                  noise_depth: float = 0.0) -> FrameObs:
    with torch.no_grad():
        out, _ = splat_forward(batch, camera, options=GEN_RENDER_OPTIONS)
    alpha = out.alpha.numpy()
    mask = alpha > 0.5
    depth = np.where(mask, out.depth.numpy() / np.maximum(alpha, 1e-12), 0.0)
    if noise_depth > 0 and rng is not None:
        depth = np.where(mask, depth * (1 + noise_depth * rng.normal(size=depth.shape)), 0.0)
    return FrameObs(image=out.color.numpy().copy(), depth=depth, mask=mask, camera=camera)


def generate_scene(spec: SceneSpec):
    """Build (prescan, dynamic, test, tracks, object) for a named builtin."""
    if spec.timesteps < 2 or spec.prescan_views < 4:
        raise ValueError("need timesteps >= 2 and prescan_views >= 4")
    obj = build_object(spec.name, spec.spacing)
    rng = np.random.default_rng(spec.seed)
    t_total = spec.timesteps

    rest = obj.positions_at(1, t_total)
    center = 0.5 * (rest.min(axis=0) + rest.max(axis=0))
    rs = 0.5 * float(np.linalg.norm(rest.max(axis=0) - rest.min(axis=0)))
    # generous framing: articulation must stay inside every view
    radius = 2.6 * rs
    w, h = spec.resolution
    focal = 0.5 * 0.75 * min(w, h) * math.sqrt(radius**2 - rs**2) / rs

    static = obj.gaussians_at(1, t_total)
    prescan = SceneSequence(kind="prescan", frames=[])
    for r in range(spec.prescan_views):
        az = 2 * math.pi * r / spec.prescan_views
        el = math.radians(22.0) * (1 if r % 2 == 0 else -1)
        cam = _orbit_camera(center, radius, az, el, focal, spec.resolution)
        prescan.frames.append(_render_frame(static, cam, rng, spec.noise_depth))

    dynamic = SceneSequence(kind="dynamic", frames=[])
    for t in range(1, t_total + 1):
        that = (t - 1) / (t_total - 1)
        az = spec.camera_motion * (math.radians(-35.0) + math.radians(70.0) * that)
        cam = _orbit_camera(center, radius, az, math.radians(12.0), focal,
                            spec.resolution)
        dynamic.frames.append(_render_frame(obj.gaussians_at(t, t_total), cam,
                                            rng, spec.noise_depth))

    test = SceneSequence(kind="test", frames=[])
    for v in range(4):
        cam = _orbit_camera(center, radius, math.radians(90.0 * v),
                            math.radians(8.0), focal, spec.resolution)
        for t in range(1, t_total + 1):
            test.frames.append(_render_frame(obj.gaussians_at(t, t_total), cam,
                                             rng, spec.noise_depth))

    tracks = _sample_tracks(obj, dynamic, spec, rng)
    return prescan, dynamic, test, tracks, obj


def _sample_tracks(obj: ArticulatedObject, dynamic: SceneSequence,
                   spec: SceneSpec, rng: np.random.Generator) -> TrackSet:
    t_total = spec.timesteps
    _, _, _, part_ids = obj.static_fields()
    rest = obj.positions_at(1, t_total)
    cam1 = dynamic.frames[0].camera
    depth1 = dynamic.frames[0].depth
    diam = float(np.linalg.norm(rest.max(axis=0) - rest.min(axis=0)))
    tau_vis = 0.01 * diam

    vis_idx = [i for i in range(len(rest))
               if _point_visible(cam1, rest[i], depth1, tau_vis)]
    if len(vis_idx) < spec.track_count:
        chosen = np.array(vis_idx, dtype=np.int64)
    else:
        chosen = rng.choice(np.array(vis_idx), size=spec.track_count, replace=False)
        chosen.sort()

    k = len(chosen)
    px = np.zeros((t_total, k, 2))
    p3d = np.zeros((t_total, k, 3))
    visible = np.zeros((t_total, k), dtype=bool)
    for t in range(1, t_total + 1):
        pos = obj.positions_at(t, t_total)[chosen]
        frame = dynamic.frames[t - 1]
        for j, p in enumerate(pos):
            res = frame.camera.project(p)
            p3d[t - 1, j] = p
            px[t - 1, j] = res.pixel
            visible[t - 1, j] = res.valid and _point_visible(
                frame.camera, p, frame.depth, tau_vis)
    query_px = px[0].copy()
    if spec.noise_tracks > 0:
        px = px + rng.normal(scale=spec.noise_tracks, size=px.shape)
    return TrackSet(query_px=query_px, query_p3d=rest[chosen].copy(),
                    query_part=part_ids[chosen].copy(), px=px, p3d=p3d,
                    visible=visible)


def _point_visible(camera: Camera, point: np.ndarray, depth_map: np.ndarray,
                   tau: float) -> bool:
    res = camera.project(point)
    if not res.valid:
        return False
    x, y = res.pixel
    h, w = depth_map.shape
    ix, iy = int(x), int(y)
    if not (0 <= ix < w and 0 <= iy < h):
        return False
    d = depth_map[iy, ix]
    return d > 0 and abs(d - res.depth) < tau
