"""Canonical model construction: surface-aligned Gaussian pixel grids built by
back-projecting virtual views of the pre-scan object, de-duplication masks,
and photometric refinement of the per-grid depth/color parameters.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from .config import (DEDUP_TAU_D, DEDUP_TAU_T, GRID_OPACITY, GRID_SCALE_FACTOR,
                     VIRTUAL_VIEW_COUNT, LossWeights)
from .core import Camera, RigidPose, look_at_pose
from .losses import photometric_loss, tv_loss
from .renderer import GaussianBatch, RenderOptions, splat_forward
from .tgeom import CameraTensors


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def sphere_radius(self) -> float:
        return 0.5 * float(np.linalg.norm(self.extent()))

    def corners(self) -> np.ndarray:
        lo, hi = self.lo, self.hi
        return np.array([[x, y, z] for x in (lo[0], hi[0])
                         for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


def compute_fg_bbox(gaussians, fg_threshold: float = 0.5, pad_factor: float = 3.0) -> Box:
    """Axis-aligned box around foreground means, padded by 3x the largest
    foreground scale."""
    if isinstance(gaussians, GaussianBatch):
        means = gaussians.means.detach().numpy()
        scales = gaussians.scales.detach().numpy()
        fg = gaussians.fg_probs.detach().numpy() > fg_threshold
    else:
        means = np.array([g.mean for g in gaussians])
        scales = np.array([g.scale for g in gaussians])
        fg = np.array([g.fg_prob for g in gaussians]) > fg_threshold
    if not fg.any():
        raise ValueError("no foreground Gaussians (fg_prob > 0.5)")
    pad = pad_factor * float(scales[fg].max())
    return Box(lo=means[fg].min(axis=0) - pad, hi=means[fg].max(axis=0) + pad)


_CORNER_DIRS = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1)
                         for z in (-1, 1)], dtype=np.float64) / math.sqrt(3.0)
_TETRA_DIRS = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]],
                       dtype=np.float64) / math.sqrt(3.0)


def _fibonacci_dirs(count: int) -> np.ndarray:
    golden = (1 + math.sqrt(5)) / 2
    k = np.arange(count)
    z = 1 - (2 * k + 1) / count
    r = np.sqrt(np.maximum(0.0, 1 - z * z))
    phi = 2 * math.pi * k / golden
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def make_virtual_cameras(box: Box, count: int = VIRTUAL_VIEW_COUNT,
                         resolution: tuple[int, int] = (48, 48),
                         fov: float | None = None,
                         distance_factor: float = 1.8,
                         fill: float = 0.9) -> list[Camera]:
    """Inward-looking cameras on the box's bounding sphere (radius x 1.8).

    count=8 uses the box-corner directions, count=4 the tetrahedral subset,
    anything else a Fibonacci sphere. Focal is set so the bounding sphere's
    silhouette fills `fill` of the smaller image dimension (unless an explicit
    fov in degrees overrides it).
    """
    if count < 4:
        raise ValueError("need at least 4 virtual views")
    rs = box.sphere_radius()
    if rs < 1e-12:
        raise ValueError("degenerate bounding box")
    if count == 8:
        dirs = _CORNER_DIRS
    elif count == 4:
        dirs = _TETRA_DIRS
    else:
        dirs = _fibonacci_dirs(count)

    w, h = resolution
    d = distance_factor * rs
    if fov is not None:
        focal = (min(w, h) / 2) / math.tan(math.radians(fov) / 2)
    else:
        # silhouette radius of a sphere at distance d is f*rs/sqrt(d^2-rs^2)
        focal = 0.5 * fill * min(w, h) * math.sqrt(d * d - rs * rs) / rs
    center = box.center()
    cams = []
    for direction in dirs:
        eye = center + d * direction
        pose = look_at_pose(eye, center)
        cams.append(Camera(focal=focal, principal_point=np.array([w / 2, h / 2]),
                           resolution=(w, h), world_to_cam=pose))
    return cams


@dataclass
class VirtualViewBundle:
    """Rendered color/depth/mask/feature grids of one virtual view."""

    camera: Camera
    color: torch.Tensor    # (H, W, 3)
    depth: torch.Tensor    # (H, W), surface depth, meaningful where mask
    mask: torch.Tensor     # (H, W) bool
    feature: torch.Tensor  # (H, W, F), unit rows where mask


@dataclass
class GaussianGrid:
    """Pixel grid of surface-aligned Gaussians attached to one virtual view.

    depth/color/feature are the grid parameters; positions and scales are
    always re-derived from depth via the back-projection and scale formulas
    (scale = depth / focal * 0.95, isotropic; opacity fixed at 0.98;
    identity rotations).
    """

    view: VirtualViewBundle
    view_index: int
    depth: torch.Tensor     # (H, W)
    color: torch.Tensor     # (H, W, 3)
    feature: torch.Tensor   # (H, W, F)
    validity: torch.Tensor  # (H, W) bool
    positions: torch.Tensor = dc_field(init=False)  # (H, W, 3)
    scales: torch.Tensor = dc_field(init=False)     # (H, W)

    def __post_init__(self):
        self.rebuild_derived()

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.depth.shape)

    def rebuild_derived(self):
        h, w = self.depth.shape
        cam = CameraTensors(self.view.camera, dtype=self.depth.dtype)
        ys, xs = torch.meshgrid(torch.arange(h, dtype=self.depth.dtype),
                                torch.arange(w, dtype=self.depth.dtype), indexing="ij")
        px = torch.stack([xs + 0.5, ys + 0.5], dim=-1).reshape(-1, 2)
        safe_depth = torch.clamp(self.depth.reshape(-1), min=1e-9)
        pts = cam.unproject_pixels(px, safe_depth)
        self.positions = pts.reshape(h, w, 3)
        self.scales = self.depth / self.view.camera.focal * GRID_SCALE_FACTOR

    def gaussian_batch(self) -> GaussianBatch:
        """Valid pixels as a renderable batch (row-major pixel order)."""
        valid = self.validity.reshape(-1).bool()
        n = int(valid.sum())
        dt = self.depth.dtype
        means = self.positions.reshape(-1, 3)[valid]
        scales = self.scales.reshape(-1)[valid].unsqueeze(-1).expand(n, 3)
        quats = torch.zeros(n, 4, dtype=dt)
        quats[:, 0] = 1.0
        return GaussianBatch(
            means=means, scales=scales, quats=quats,
            opacities=torch.full((n,), GRID_OPACITY, dtype=dt),
            colors=self.color.reshape(-1, 3)[valid],
            features=self.feature.reshape(-1, self.feature.shape[-1])[valid],
            fg_probs=torch.ones(n, dtype=dt))


def build_grid_from_view(fg_gaussians, camera: Camera,
                         options: RenderOptions | None = None) -> GaussianGrid:
    """Render the foreground set into a virtual view and back-project every
    masked pixel to a surface-aligned Gaussian."""
    if isinstance(fg_gaussians, GaussianBatch):
        batch = fg_gaussians.detach()
    else:
        batch = GaussianBatch.from_gaussians(fg_gaussians)
    with torch.no_grad():
        out, _ = splat_forward(batch, camera, attribute=batch.features, options=options)
    alpha = out.alpha
    mask = alpha > 0.5
    if not bool(mask.any()):
        warnings.warn("virtual view sees no foreground; grid will be empty")
    safe_alpha = torch.clamp(alpha, min=1e-12)
    depth = torch.where(mask, out.depth / safe_alpha, torch.zeros_like(alpha))
    color = torch.where(mask.unsqueeze(-1), out.color / safe_alpha.unsqueeze(-1),
                        torch.zeros_like(out.color)).clamp(0.0, 1.0)
    feat = out.attribute / safe_alpha.unsqueeze(-1)
    norm = torch.linalg.norm(feat, dim=-1, keepdim=True).clamp(min=1e-12)
    feat = torch.where(mask.unsqueeze(-1), feat / norm, torch.zeros_like(feat))
    bundle = VirtualViewBundle(camera=camera, color=color, depth=depth,
                               mask=mask, feature=feat)
    return GaussianGrid(view=bundle, view_index=0, depth=depth.clone(),
                        color=color.clone(), feature=feat.clone(), validity=mask.clone())


def build_grids(fg_gaussians, cameras: list[Camera],
                options: RenderOptions | None = None) -> list[GaussianGrid]:
    grids = []
    for i, cam in enumerate(cameras):
        g = build_grid_from_view(fg_gaussians, cam, options=options)
        g.view_index = i
        grids.append(g)
    return grids


@dataclass
class DedupMaskSet:
    """Per-view keep masks for one accumulation order (start view)."""

    start_view: int
    masks: list[torch.Tensor]  # (H, W) bool per view, view-index order


def _concat_batches(batches: list[GaussianBatch]) -> GaussianBatch:
    return GaussianBatch(
        means=torch.cat([b.means for b in batches]),
        scales=torch.cat([b.scales for b in batches]),
        quats=torch.cat([b.quats for b in batches]),
        opacities=torch.cat([b.opacities for b in batches]),
        colors=torch.cat([b.colors for b in batches]),
        features=torch.cat([b.features for b in batches])
        if batches[0].features is not None else None,
        fg_probs=torch.cat([b.fg_probs for b in batches])
        if batches[0].fg_probs is not None else None)


def build_dedup_masks(grids: list[GaussianGrid], start_view: int,
                      tau_t: float = DEDUP_TAU_T, tau_d: float = DEDUP_TAU_D,
                      options: RenderOptions | None = None) -> DedupMaskSet:
    """Sequential accumulation starting from `start_view`: a pixel of the next
    view is kept iff the already-accumulated content leaves it unoccluded
    (transmittance above 1 - tau_t) or geometrically distinct (rendered depth
    differing from the view's own depth by more than tau_d)."""
    n = len(grids)
    if not 0 <= start_view < n:
        raise ValueError(f"start_view {start_view} out of range 0..{n - 1}")
    masks: list[torch.Tensor | None] = [None] * n
    masks[start_view] = grids[start_view].validity.clone()
    acc = [grids[start_view].gaussian_batch()]

    for step in range(1, n):
        j = (start_view + step) % n
        grid = grids[j]
        accumulated = _concat_batches(acc)
        if accumulated.n == 0:
            keep = grid.validity.clone()
        else:
            with torch.no_grad():
                out, _ = splat_forward(accumulated, grid.view.camera, options=options)
            trans = out.transmittance
            norm_depth = out.depth / torch.clamp(out.alpha, min=1e-12)
            unoccluded = trans > (1.0 - tau_t)
            distinct = torch.abs(norm_depth - grid.depth) > tau_d
            keep = grid.validity & (unoccluded | distinct)
        masks[j] = keep
        kept_batch = _grid_batch_with_mask(grid, keep)
        if kept_batch.n:
            acc.append(kept_batch)
    return DedupMaskSet(start_view=start_view, masks=masks)


def _grid_batch_with_mask(grid: GaussianGrid, mask: torch.Tensor) -> GaussianBatch:
    saved = grid.validity
    grid.validity = mask
    try:
        return grid.gaussian_batch()
    finally:
        grid.validity = saved


def build_all_dedup_sets(grids: list[GaussianGrid], **kw) -> list[DedupMaskSet]:
    return [build_dedup_masks(grids, s, **kw) for s in range(len(grids))]


def refine_canonical(grids: list[GaussianGrid], prescan, weights: LossWeights,
                     iters: int, lr: float = 1e-3, seed: int = 0,
                     options: RenderOptions | None = None,
                     dedup_sets: list[DedupMaskSet] | None = None,
                     lr_decay: bool = True,
                     log_every: int = 0) -> list[float]:
    """Photometric refinement of grid depths and colors against pre-scan views.

    One pre-scan view is sampled per iteration (the full objective averages
    over views, so uniform sampling optimizes it in expectation). When dedup
    mask sets are given, one is sampled per iteration and only its Gaussians
    render; without them the coincident duplicate layers of overlapping grids
    occlude each other and the occluded parameters drift. Positions and
    scales are re-derived from depth inside the graph at every step. Returns
    the per-iteration loss history; grids are updated in place.
    """
    frames = list(prescan.frames) if hasattr(prescan, "frames") else list(prescan)
    if not frames:
        raise ValueError("pre-scan must contain at least one frame")
    depth_leaves = [g.depth.detach().clone().requires_grad_() for g in grids]
    color_leaves = [g.color.detach().clone().requires_grad_() for g in grids]
    opt = torch.optim.Adam(depth_leaves + color_leaves, lr=lr)
    # Adam with a fixed step oscillates around the optimum at ~lr amplitude;
    # cosine decay lets the refinement actually settle
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(1, iters), eta_min=lr * 0.01) if lr_decay else None
    rng = np.random.default_rng(seed)
    history = []

    for it in range(iters):
        frame = frames[int(rng.integers(len(frames)))]
        if dedup_sets is not None:
            chosen = dedup_sets[int(rng.integers(len(dedup_sets)))]
        batches = []
        for gi, (g, dleaf, cleaf) in enumerate(zip(grids, depth_leaves, color_leaves)):
            valid = g.validity.reshape(-1).bool()
            if dedup_sets is not None:
                valid = valid & chosen.masks[gi].reshape(-1).bool()
            n = int(valid.sum())
            if n == 0:
                continue
            cam = CameraTensors(g.view.camera, dtype=dleaf.dtype)
            h, w = g.shape
            ys, xs = torch.meshgrid(torch.arange(h, dtype=dleaf.dtype),
                                    torch.arange(w, dtype=dleaf.dtype), indexing="ij")
            px = torch.stack([xs + 0.5, ys + 0.5], dim=-1).reshape(-1, 2)[valid]
            d = torch.clamp(dleaf.reshape(-1)[valid], min=1e-6)
            means = cam.unproject_pixels(px, d)
            scales = (d / g.view.camera.focal * GRID_SCALE_FACTOR).unsqueeze(-1).expand(n, 3)
            quats = torch.zeros(n, 4, dtype=dleaf.dtype)
            quats[:, 0] = 1.0
            batches.append(GaussianBatch(
                means=means, scales=scales, quats=quats,
                opacities=torch.full((n,), GRID_OPACITY, dtype=dleaf.dtype),
                colors=cleaf.reshape(-1, 3)[valid].clamp(0.0, 1.0)))
        out, _ = splat_forward(_concat_batches(batches), frame.camera, options=options)
        target = torch.as_tensor(frame.image, dtype=out.color.dtype)
        loss = photometric_loss(out.color, target, lam_ssim=weights.ssim)
        tv = sum(tv_loss(c, g.validity) for c, g in zip(color_leaves, grids))
        loss = loss + weights.tv * tv
        opt.zero_grad()
        loss.backward()
        opt.step()
        if sched is not None:
            sched.step()
        history.append(float(loss.detach()))
        if log_every and (it % log_every == 0):
            print(f"refine iter {it}: loss {history[-1]:.6f}")

    for g, dleaf, cleaf in zip(grids, depth_leaves, color_leaves):
        g.depth = dleaf.detach().clone()
        g.color = cleaf.detach().clamp(0.0, 1.0).clone()
        g.rebuild_derived()
    return history
