"""Training objectives: photometric, tracking, depth, reprojection, isometry,
rigidity, total variation, plus the frozen neighbor graphs they sample.

All losses are differentiable torch scalars. Map lookups at non-integer track
coordinates use bilinear interpolation; pixel centers sit at integer + 0.5.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from .config import DENSE_NEIGHBORS, LossWeights

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
TRACK_ALPHA_MIN = 0.5


def bilinear_sample(grid: torch.Tensor, pts: torch.Tensor) -> torch.Tensor:
    """Sample (H, W) or (H, W, C) maps at continuous (x, y) points, (K, 2).

    Border behavior clamps to edge pixels; gradients flow into grid values.
    """
    squeeze = grid.ndim == 2
    if squeeze:
        grid = grid.unsqueeze(-1)
    h, w, _ = grid.shape
    u = pts[:, 0] - 0.5
    v = pts[:, 1] - 0.5
    x0 = torch.clamp(torch.floor(u).long(), 0, w - 1)
    y0 = torch.clamp(torch.floor(v).long(), 0, h - 1)
    x1 = torch.clamp(x0 + 1, 0, w - 1)
    y1 = torch.clamp(y0 + 1, 0, h - 1)
    fx = torch.clamp(u - x0.to(grid.dtype), 0.0, 1.0).unsqueeze(-1)
    fy = torch.clamp(v - y0.to(grid.dtype), 0.0, 1.0).unsqueeze(-1)
    v00, v01 = grid[y0, x0], grid[y0, x1]
    v10, v11 = grid[y1, x0], grid[y1, x1]
    out = (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
           + v10 * (1 - fx) * fy + v11 * fx * fy)
    return out.squeeze(-1) if squeeze else out


def _gaussian_window(dtype) -> torch.Tensor:
    half = (SSIM_WINDOW - 1) / 2
    coords = torch.arange(SSIM_WINDOW, dtype=dtype) - half
    g = torch.exp(-(coords**2) / (2 * SSIM_SIGMA**2))
    g = g / g.sum()
    return g.outer(g)


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean structural similarity over valid 11x11 Gaussian windows, channels
    averaged. Inputs are (H, W) or (H, W, C) images in [0, 1]."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 2:
        a, b = a.unsqueeze(-1), b.unsqueeze(-1)
    h, w, c = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = _gaussian_window(a.dtype).expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)
    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)

    def f(t):
        return torch.nn.functional.conv2d(t, win, groups=c)

    mx, my = f(x), f(y)
    sxx = f(x * x) - mx * mx
    syy = f(y * y) - my * my
    sxy = f(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).mean()


def ssim_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (1.0 - ssim(a, b)) / 2.0


def photometric_loss(render: torch.Tensor, target: torch.Tensor,
                     lam_ssim: float = 0.25) -> torch.Tensor:
    """Mean L1 plus weighted SSIM loss between a rendered and observed image."""
    if render.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(render.shape)} vs {tuple(target.shape)}")
    return torch.mean(torch.abs(render - target)) + lam_ssim * ssim_loss(render, target)


def tv_loss(grid: torch.Tensor, validity: torch.Tensor | None = None) -> torch.Tensor:
    """Mean absolute horizontal plus vertical differences over valid pairs."""
    g = grid if grid.ndim == 3 else grid.unsqueeze(-1)
    dh = torch.abs(g[:, 1:] - g[:, :-1])
    dv = torch.abs(g[1:, :] - g[:-1, :])
    if validity is None:
        return dh.mean() + dv.mean()
    val = validity.to(grid.dtype)
    wh = (val[:, 1:] * val[:, :-1]).unsqueeze(-1)
    wv = (val[1:, :] * val[:-1, :]).unsqueeze(-1)
    nh = torch.clamp(wh.sum() * g.shape[-1], min=1.0)
    nv = torch.clamp(wv.sum() * g.shape[-1], min=1.0)
    return (dh * wh).sum() / nh + (dv * wv).sum() / nv


def depth_loss(render_depth: torch.Tensor, target_depth: torch.Tensor,
               mask_fg: torch.Tensor) -> torch.Tensor:
    """Masked mean absolute depth error; mask is GT foreground AND rendered
    foreground (alpha > 0.5)."""
    if render_depth.shape != target_depth.shape:
        raise ValueError("depth shape mismatch")
    m = mask_fg.to(render_depth.dtype)
    n = m.sum()
    if n.item() == 0:
        warnings.warn("depth_loss: empty foreground mask, returning 0")
        return torch.zeros((), dtype=render_depth.dtype)
    return (torch.abs(render_depth - target_depth) * m).sum() / n


def _sample_alpha_valid(alpha_map: torch.Tensor, query_px: torch.Tensor):
    a = bilinear_sample(alpha_map, query_px)
    return a, a >= TRACK_ALPHA_MIN


def tracking_loss(pred_pixel_map: torch.Tensor, ref_pixel_map: torch.Tensor,
                  alpha_map: torch.Tensor, query_px: torch.Tensor,
                  target_px: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Mean per-point L1 pixel error of predicted 2D motion.

    The prediction at query p1 reads the reprojected pixel-position composite
    (weights frozen at the reference frame) relative to the same composite of
    the canonical state, so the static part of the splat mixture cancels:
        p_hat = p1 + (pred[p1] - ref[p1]) / alpha[p1].
    Points whose reference alpha falls below 0.5 are excluded and counted.
    """
    a, ok = _sample_alpha_valid(alpha_map, query_px)
    n_excluded = int((~ok).sum())
    if int(ok.sum()) == 0:
        warnings.warn("tracking_loss: no query points remain after alpha exclusion")
        return torch.zeros((), dtype=pred_pixel_map.dtype), n_excluded
    pred = bilinear_sample(pred_pixel_map, query_px)
    ref = bilinear_sample(ref_pixel_map, query_px)
    p_hat = query_px + (pred - ref) / a.unsqueeze(-1)
    err = torch.abs(p_hat - target_px).sum(dim=-1)
    return err[ok].mean(), n_excluded


def reprojection_loss(reproj_depth_map: torch.Tensor, alpha_map: torch.Tensor,
                      target_depth_t: torch.Tensor, query_px: torch.Tensor,
                      target_px_t: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Mean per-point L1 between the input depth at the tracked pixel and the
    reprojected (reference-footprint, alpha-normalized) depth at the query."""
    a, ok = _sample_alpha_valid(alpha_map, query_px)
    n_excluded = int((~ok).sum())
    if int(ok.sum()) == 0:
        warnings.warn("reprojection_loss: no query points remain after alpha exclusion")
        return torch.zeros((), dtype=reproj_depth_map.dtype), n_excluded
    pred = bilinear_sample(reproj_depth_map, query_px) / a
    gt = bilinear_sample(target_depth_t, target_px_t)
    err = torch.abs(pred - gt)
    return err[ok].mean(), n_excluded


@dataclass
class NeighborGraph:
    """Frozen sampling structure for the isometry and rigidity losses.

    Built once from canonical positions/features; indices and weights never
    change afterwards. Coarse edges connect a 1% subset to its nearest
    neighbors inside the subset with cosine feature-similarity weights;
    dense edges connect every Gaussian to its 200 nearest neighbors with
    Gaussian kernel weights exp(-beta d^2).
    """

    coarse_idx: torch.Tensor     # (Nc,) indices into the canonical set
    coarse_src: torch.Tensor     # (Ec,) edge sources (canonical indexing)
    coarse_dst: torch.Tensor     # (Ec,)
    coarse_w: torch.Tensor       # (Ec,) cosine similarity clamped to [0, 1]
    dense_src: torch.Tensor      # (Ed,)
    dense_dst: torch.Tensor      # (Ed,)
    dense_w: torch.Tensor        # (Ed,) exp(-beta d^2)
    n_coarse: int
    n_total: int

    @classmethod
    def build(cls, positions: np.ndarray, features: np.ndarray, seed: int = 0,
              beta: float = 2000.0, coarse_fraction: float = 0.01,
              dense_k: int = DENSE_NEIGHBORS) -> "NeighborGraph":
        n = positions.shape[0]
        if n < 2:
            raise ValueError("need at least 2 Gaussians to build a neighbor graph")
        rng = np.random.default_rng(seed)
        n_coarse = max(2, int(round(coarse_fraction * n)))
        coarse_idx = np.sort(rng.choice(n, size=min(n_coarse, n), replace=False))
        n_coarse = len(coarse_idx)

        cpos = positions[coarse_idx]
        k_crs = max(1, int(np.ceil(coarse_fraction * n_coarse)))
        k_crs = min(k_crs, n_coarse - 1)
        tree = cKDTree(cpos)
        _, nbr = tree.query(cpos, k=k_crs + 1)
        nbr = np.atleast_2d(nbr)[:, 1:]  # drop self
        src = np.repeat(np.arange(n_coarse), k_crs)
        dst = nbr.reshape(-1)
        feat = features / np.maximum(np.linalg.norm(features, axis=1, keepdims=True), 1e-12)
        cf = feat[coarse_idx]
        w = np.clip(np.sum(cf[src] * cf[dst], axis=1), 0.0, 1.0)

        dk = min(dense_k, n - 1)
        tree_all = cKDTree(positions)
        dist_all, nbr_all = tree_all.query(positions, k=dk + 1)
        dsrc = np.repeat(np.arange(n), dk)
        ddst = nbr_all[:, 1:].reshape(-1)
        ddist = dist_all[:, 1:].reshape(-1)
        dw = np.exp(-beta * ddist**2)

        long = torch.long
        return cls(
            coarse_idx=torch.as_tensor(coarse_idx, dtype=long),
            coarse_src=torch.as_tensor(coarse_idx[src], dtype=long),
            coarse_dst=torch.as_tensor(coarse_idx[dst], dtype=long),
            coarse_w=torch.as_tensor(w, dtype=torch.float64),
            dense_src=torch.as_tensor(dsrc, dtype=long),
            dense_dst=torch.as_tensor(ddst, dtype=long),
            dense_w=torch.as_tensor(dw, dtype=torch.float64),
            n_coarse=n_coarse, n_total=n,
        )


def _isometry(src, dst, w, norm, pos_can, pos_t):
    d_can = torch.linalg.norm(pos_can[src] - pos_can[dst], dim=-1)
    d_t = torch.linalg.norm(pos_t[src] - pos_t[dst], dim=-1)
    return (w * torch.abs(d_can - d_t)).sum() / norm


def coarse_isometry_loss(graph: NeighborGraph, pos_can: torch.Tensor,
                         pos_t: torch.Tensor) -> torch.Tensor:
    """Feature-weighted change of pairwise distances over the sparse subset."""
    if graph.n_coarse < 2:
        raise ValueError("coarse subset has fewer than 2 Gaussians")
    return _isometry(graph.coarse_src, graph.coarse_dst, graph.coarse_w,
                     graph.n_coarse, pos_can, pos_t)


def dense_isometry_loss(graph: NeighborGraph, pos_can: torch.Tensor,
                        pos_t: torch.Tensor) -> torch.Tensor:
    """Kernel-weighted change of pairwise distances over local neighborhoods."""
    return _isometry(graph.dense_src, graph.dense_dst, graph.dense_w,
                     graph.n_total, pos_can, pos_t)


def canonicalize_hemisphere(q: torch.Tensor) -> torch.Tensor:
    """Flip quaternion rows so the first nonzero component is nonnegative."""
    sign = torch.zeros_like(q[:, 0])
    for k in range(4):
        comp = q[:, k]
        sign = torch.where((sign == 0) & (comp != 0), torch.sign(comp), sign)
    sign = torch.where(sign == 0, torch.ones_like(sign), sign)
    return q * sign.unsqueeze(-1)


def rigidity_loss(graph: NeighborGraph, quats_t: torch.Tensor) -> torch.Tensor:
    """Feature-weighted L1 difference of deformation rotations over coarse
    edges, after hemisphere canonicalization of the quaternion double cover."""
    if graph.n_coarse < 2:
        raise ValueError("coarse subset has fewer than 2 Gaussians")
    qc = canonicalize_hemisphere(quats_t)
    diff = torch.abs(qc[graph.coarse_src] - qc[graph.coarse_dst]).sum(dim=-1)
    return (graph.coarse_w * diff).sum() / graph.n_coarse


def total_loss(components: dict, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of per-timestep loss components.

    `components` maps names (photo, track, depth, reproj, crs_iso, dense_iso,
    rigid) to scalars; missing entries contribute nothing. The photometric
    term carries implicit weight 1 (its SSIM share is weighted internally).
    """
    lam = {"photo": 1.0, "track": weights.track, "depth": weights.depth,
           "reproj": weights.reproj, "crs_iso": weights.crs_iso,
           "dense_iso": weights.dense_iso, "rigid": weights.rigid}
    total = None
    for name, value in components.items():
        if name not in lam:
            raise ValueError(f"unknown loss component {name!r}")
        term = lam[name] * value
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no loss components supplied")
    return total
