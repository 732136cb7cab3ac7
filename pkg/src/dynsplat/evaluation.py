"""Quantitative evaluation: masked photometric metrics on held-out views and
long-range 3D tracking via nearest-Gaussian trajectory extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
from scipy.spatial import cKDTree

from .losses import ssim as ssim_fn, SSIM_WINDOW, _gaussian_window

PSNR_CAP = 99.0


@dataclass
class MetricsReport:
    mpsnr: float
    mssim: float
    epe: float
    delta_005: float
    delta_01: float
    n_frames: int
    n_tracks: int
    per_view_psnr: list[float]
    per_view_ssim: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


def masked_psnr(render: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """10*log10(1/masked MSE) for [0,1] images; identical images cap at 99 dB."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("empty mask")
    diff = (np.asarray(render, dtype=np.float64) - np.asarray(target, dtype=np.float64))[m]
    mse = float(np.mean(diff**2))
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def masked_ssim(render: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """SSIM map averaged over valid windows whose center pixel is masked."""
    a = torch.as_tensor(render, dtype=torch.float64)
    b = torch.as_tensor(target, dtype=torch.float64)
    if a.ndim == 2:
        a, b = a.unsqueeze(-1), b.unsqueeze(-1)
    h, w, c = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")
    win = _gaussian_window(a.dtype).expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)
    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)

    def f(t):
        return torch.nn.functional.conv2d(t, win, groups=c)

    c1, c2 = 0.01**2, 0.03**2
    mx, my = f(x), f(y)
    sxx, syy, sxy = f(x * x) - mx * mx, f(y * y) - my * my, f(x * y) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)
            / ((mx * mx + my * my + c1) * (sxx + syy + c2)))[0].mean(dim=0)
    half = SSIM_WINDOW // 2
    centers = torch.as_tensor(np.asarray(mask, dtype=bool))[half:h - half, half:w - half]
    if not bool(centers.any()):
        raise ValueError("mask has no interior window centers")
    return float(smap[centers].mean())


def extract_tracks(deformed_per_t: list[np.ndarray], queries: np.ndarray) -> np.ndarray:
    """Nearest reference-time Gaussian center per query; its trajectory over
    all timesteps is the predicted 3D track. Ties break to the lowest index."""
    if not deformed_per_t or deformed_per_t[0].shape[0] == 0:
        raise ValueError("empty Gaussian set")
    ref = np.asarray(deformed_per_t[0], dtype=np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    d, idx = cKDTree(ref).query(queries, k=1)
    # cKDTree breaks ties arbitrarily; enforce lowest-index determinism
    for j, (dist, i) in enumerate(zip(d, idx)):
        dup = np.nonzero(np.isclose(np.linalg.norm(ref - queries[j], axis=1), dist,
                                    rtol=0, atol=1e-12))[0]
        if len(dup):
            idx[j] = dup[0]
    out = np.stack([np.asarray(frame)[idx] for frame in deformed_per_t])
    return out  # (T, K, 3)


def tracking_metrics(pred: np.ndarray, gt: np.ndarray,
                     thresholds=(0.05, 0.1)) -> tuple[float, list[float]]:
    """Mean 3D end-point error over all (track, timestep) pairs and the
    fraction under each threshold (scene units)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    err = np.linalg.norm(pred - gt, axis=-1).ravel()
    epe = float(err.mean())
    deltas = [float(np.mean(err < tau)) for tau in thresholds]
    return epe, deltas
