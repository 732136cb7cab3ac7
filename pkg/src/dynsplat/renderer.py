"""Differentiable splatting of 3D Gaussians by front-to-back alpha compositing.

The forward pass is a flat, fully vectorized pipeline: project every Gaussian,
build its 2D footprint rectangle, expand (gaussian, pixel) contribution pairs,
sort them by (pixel, camera depth) and composite with a segmented cumulative
product of transmittances in log space. Everything stays inside torch autograd,
so reverse-mode gradients of every output channel w.r.t. every Gaussian
parameter are exact for this forward.

Compositing semantics (shared with the reference compositor `naive_composite`):
  * Gaussians with camera depth <= znear or opacity < 1/255 are skipped, as
    are Gaussians whose 2D covariance condition number exceeds 1e12 (tallied).
  * 2D covariance = J W Sigma W^T J^T plus a low-pass floor on the diagonal.
  * per-pixel weight alpha' = min(opacity * exp(-0.5 d^T Sigma'^-1 d), 0.99).
  * color/depth/alpha/attribute are alpha'-T weighted sums, T the product of
    (1 - alpha') over strictly nearer contributions at the same pixel; depth
    ties break by input index.
The footprint rectangle radius (cull_sigma standard deviations) is the only
approximation; a dropped tail contribution is bounded by exp(-cull_sigma^2/2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .core import Camera, Gaussian3D
from .tgeom import CameraTensors, quat_to_matrix_t

ZNEAR = 1e-6
MIN_OPACITY = 1.0 / 255.0
ALPHA_CLAMP = 0.99
LOWPASS = 0.3
COND_MAX = 1e12


class ContractViolation(ValueError):
    """An argument breaks a renderer precondition (shape/alignment)."""


@dataclass
class RenderOptions:
    cull_sigma: float = 9.0
    lowpass: float = LOWPASS
    znear: float = ZNEAR
    dtype: torch.dtype = torch.float64


@dataclass
class GaussianBatch:
    """Torch tensor view of a Gaussian set; the unit the renderer consumes."""

    means: torch.Tensor          # (N, 3)
    scales: torch.Tensor         # (N, 3)
    quats: torch.Tensor          # (N, 4), unit rows
    opacities: torch.Tensor      # (N,)
    colors: torch.Tensor         # (N, 3)
    features: torch.Tensor | None = None  # (N, F)
    fg_probs: torch.Tensor | None = None  # (N,)

    @property
    def n(self) -> int:
        return self.means.shape[0]

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian3D], dtype=torch.float64,
                       requires_grad: bool = False) -> "GaussianBatch":
        def stack(fn, shape):
            if not gaussians:
                return torch.zeros((0, *shape), dtype=dtype, requires_grad=requires_grad)
            t = torch.as_tensor(np.stack([fn(g) for g in gaussians]), dtype=dtype)
            return t.requires_grad_() if requires_grad else t

        feats = None
        if gaussians:
            sizes = {len(g.feature) for g in gaussians}
            if len(sizes) == 1:
                feats = stack(lambda g: g.feature, (sizes.pop(),))
        return cls(
            means=stack(lambda g: g.mean, (3,)),
            scales=stack(lambda g: g.scale, (3,)),
            quats=stack(lambda g: g.rotation, (4,)),
            opacities=stack(lambda g: np.float64(g.opacity), ()),
            colors=stack(lambda g: g.color, (3,)),
            features=feats,
            fg_probs=stack(lambda g: np.float64(g.fg_prob), ()),
        )

    def subset(self, mask: torch.Tensor) -> "GaussianBatch":
        return GaussianBatch(
            self.means[mask], self.scales[mask], self.quats[mask],
            self.opacities[mask], self.colors[mask],
            None if self.features is None else self.features[mask],
            None if self.fg_probs is None else self.fg_probs[mask])

    def detach(self) -> "GaussianBatch":
        return GaussianBatch(
            self.means.detach(), self.scales.detach(), self.quats.detach(),
            self.opacities.detach(), self.colors.detach(),
            None if self.features is None else self.features.detach(),
            None if self.fg_probs is None else self.fg_probs.detach())


@dataclass
class RenderOutput:
    color: torch.Tensor          # (H, W, 3)
    depth: torch.Tensor          # (H, W) alpha-weighted expected depth
    alpha: torch.Tensor          # (H, W)
    transmittance: torch.Tensor  # (H, W) = 1 - alpha
    attribute: torch.Tensor | None = None  # (H, W, A)
    skipped: dict = field(default_factory=dict)  # diagnostics tallies


@dataclass
class GradientTape:
    """Single-use record tying a render's outputs back to its inputs."""

    inputs: dict
    output: RenderOutput
    used: bool = False


def _project_cov2d(batch: GaussianBatch, cam: CameraTensors, lowpass: float):
    """Project means and build per-Gaussian 2D covariance entries (a, b, c)."""
    pc = cam.world_to_cam_points(batch.means)
    z = pc[:, 2]
    px = cam.pp + cam.focal * pc[:, :2] / z.unsqueeze(-1)

    r_g = quat_to_matrix_t(batch.quats)                       # (N, 3, 3)
    m = r_g * batch.scales.unsqueeze(-2)                      # R @ diag(s)
    cov3d = m @ m.transpose(-1, -2)
    covc = cam.rot @ cov3d @ cam.rot.T                        # camera frame

    fz = cam.focal / z
    fz2 = cam.focal / (z * z)
    # J rows: [f/z, 0, -f x/z^2], [0, f/z, -f y/z^2]
    zero = torch.zeros_like(fz)
    j = torch.stack([
        torch.stack([fz, zero, -fz2 * pc[:, 0]], -1),
        torch.stack([zero, fz, -fz2 * pc[:, 1]], -1),
    ], -2)
    cov2d = j @ covc @ j.transpose(-1, -2)
    a = cov2d[:, 0, 0] + lowpass
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + lowpass
    return px, z, a, b, c


def _cov2d_eigs(a, b, c):
    mid = 0.5 * (a + c)
    rad = torch.sqrt(torch.clamp((0.5 * (a - c)) ** 2 + b * b, min=0.0))
    return mid + rad, torch.clamp(mid - rad, min=1e-30)


def _entry_list(batch: GaussianBatch, cam: CameraTensors, opts: RenderOptions):
    """Sorted front-to-back contribution list of one forward pass.

    Returns (pix_s, g_s, weight_s, z, skipped): flat pixel index, original
    Gaussian index, composite weight alpha'*T per contribution (all sorted by
    pixel then depth), the per-Gaussian camera depths, and diagnostics tallies.
    """
    h, w = cam.height, cam.width
    dt = batch.means.dtype
    nothing = (torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long),
               torch.zeros(0, dtype=dt), torch.zeros(batch.n, dtype=dt))
    skipped = dict(behind=0, opacity=0, conditioning=0)
    if batch.n == 0:
        return *nothing, skipped

    px, z, a, b, c = _project_cov2d(batch, cam, opts.lowpass)
    lam_max, lam_min = _cov2d_eigs(a, b, c)

    front = z > opts.znear
    opaque = batch.opacities >= MIN_OPACITY
    conditioned = (lam_max / lam_min) <= COND_MAX
    keep = front & opaque & conditioned
    skipped = dict(
        behind=int((~front).sum()),
        opacity=int((front & ~opaque).sum()),
        conditioning=int((front & opaque & ~conditioned).sum()),
    )
    idx = torch.nonzero(keep, as_tuple=False).squeeze(-1)
    if idx.numel() == 0:
        return *nothing[:3], z, skipped

    fpx, fz, fa, fb, fc = px[idx], z[idx], a[idx], b[idx], c[idx]
    fopac = batch.opacities[idx]
    m = idx.numel()

    # integer footprint rectangles around each projected center
    radius = (opts.cull_sigma * torch.sqrt(lam_max[idx])).detach()
    cx, cy = fpx[:, 0].detach(), fpx[:, 1].detach()
    ix0 = torch.clamp(torch.ceil(cx - radius - 0.5).long(), 0, w - 1)
    ix1 = torch.clamp(torch.floor(cx + radius - 0.5).long(), 0, w - 1)
    iy0 = torch.clamp(torch.ceil(cy - radius - 0.5).long(), 0, h - 1)
    iy1 = torch.clamp(torch.floor(cy + radius - 0.5).long(), 0, h - 1)
    on = (torch.floor(cx + radius - 0.5) >= 0) & (torch.ceil(cx - radius - 0.5) <= w - 1) \
        & (torch.floor(cy + radius - 0.5) >= 0) & (torch.ceil(cy - radius - 0.5) <= h - 1)
    nx = torch.where(on, ix1 - ix0 + 1, torch.zeros_like(ix0))
    counts = nx * torch.where(on, iy1 - iy0 + 1, torch.zeros_like(iy0))
    total = int(counts.sum())
    if total == 0:
        return *nothing[:3], z, skipped

    gi = torch.repeat_interleave(torch.arange(m), counts)
    start = torch.cumsum(counts, 0) - counts
    local = torch.arange(total) - start[gi]
    exi = ix0[gi] + local % nx[gi]
    eyi = iy0[gi] + local // nx[gi]
    pix = eyi * w + exi

    # evaluate the Gaussian weight at each covered pixel center
    dx = (exi.to(dt) + 0.5) - fpx[gi, 0]
    dy = (eyi.to(dt) + 0.5) - fpx[gi, 1]
    det = fa * fc - fb * fb
    ia, ib, ic = fc / det, -fb / det, fa / det
    power = -0.5 * (ia[gi] * dx * dx + 2.0 * ib[gi] * dx * dy + ic[gi] * dy * dy)
    alpha_e = torch.clamp(fopac[gi] * torch.exp(power), max=ALPHA_CLAMP)

    # front-to-back order: sort contributions by (pixel, depth rank)
    rank = torch.argsort(torch.argsort(fz, stable=True), stable=True)
    order = torch.argsort(pix * m + rank[gi])
    pix_s, gi_s, alpha_s = pix[order], gi[order], alpha_e[order]

    # segmented exclusive cumulative product of (1 - alpha') in log space
    cume = torch.cumsum(torch.log1p(-alpha_s), 0)
    excl = torch.cat([torch.zeros(1, dtype=dt), cume[:-1]])
    newseg = torch.ones(total, dtype=torch.bool)
    newseg[1:] = pix_s[1:] != pix_s[:-1]
    segstart = torch.cummax(
        torch.where(newseg, torch.arange(total), torch.zeros(total, dtype=torch.long)), 0)[0]
    weight = alpha_s * torch.exp(excl - excl[segstart])
    return pix_s, idx[gi_s], weight, z, skipped


def _composite(batch: GaussianBatch, cam: CameraTensors,
               attribute: torch.Tensor | None, opts: RenderOptions) -> RenderOutput:
    h, w = cam.height, cam.width
    dt = batch.means.dtype
    n_attr = 0 if attribute is None else attribute.shape[1]
    pix_s, g_s, weight, z, skipped = _entry_list(batch, cam, opts)

    wcol = weight.unsqueeze(-1)
    alpha = torch.zeros(h * w, dtype=dt).index_add(0, pix_s, weight)
    color = torch.zeros(h * w, 3, dtype=dt).index_add(0, pix_s, wcol * batch.colors[g_s])
    depth = torch.zeros(h * w, dtype=dt).index_add(0, pix_s, weight * z[g_s])
    attr = None
    if attribute is not None:
        attr = torch.zeros(h * w, n_attr, dtype=dt).index_add(
            0, pix_s, wcol * attribute[g_s]).view(h, w, n_attr)
    alpha = alpha.view(h, w)
    return RenderOutput(color=color.view(h, w, 3), depth=depth.view(h, w),
                        alpha=alpha, transmittance=1.0 - alpha,
                        attribute=attr, skipped=skipped)


def splat_forward(gaussians, camera: Camera, attribute: torch.Tensor | None = None,
                  options: RenderOptions | None = None) -> tuple[RenderOutput, GradientTape]:
    """Render a Gaussian set into `camera`; returns the output and its tape.

    `gaussians` may be a list of Gaussian3D (converted to leaf tensors with
    gradients enabled) or a GaussianBatch already wired into a larger graph.
    `attribute` is an optional (N, A) per-Gaussian payload composited like
    color.
    """
    opts = options or RenderOptions()
    leaf_mode = isinstance(gaussians, list)
    if leaf_mode:
        batch = GaussianBatch.from_gaussians(gaussians, dtype=opts.dtype, requires_grad=True)
    else:
        batch = gaussians
    if attribute is not None:
        attribute = torch.as_tensor(attribute, dtype=batch.means.dtype)
        if attribute.ndim == 1:
            attribute = attribute.unsqueeze(-1)
        if attribute.shape[0] != batch.n:
            raise ContractViolation(
                f"attribute rows {attribute.shape[0]} != gaussian count {batch.n}")
        if leaf_mode and not attribute.requires_grad:
            attribute = attribute.clone().requires_grad_()

    cam = CameraTensors(camera, dtype=batch.means.dtype)
    out = _composite(batch, cam, attribute, opts)
    inputs = {
        "mean": batch.means, "scale": batch.scales, "rotation": batch.quats,
        "opacity": batch.opacities, "color": batch.colors,
    }
    if attribute is not None:
        inputs["attribute"] = attribute
    return out, GradientTape(inputs=inputs, output=out)


_CHANNELS = ("color", "depth", "alpha", "transmittance", "attribute")


def splat_backward(tape: GradientTape, upstream: dict) -> dict:
    """Pull upstream output-channel gradients back to every Gaussian parameter.

    `upstream` maps channel names (any subset of color/depth/alpha/
    transmittance/attribute) to arrays shaped like the corresponding output.
    Returns gradients keyed by parameter name (mean, scale, rotation, opacity,
    color, and attribute when one was rendered).
    """
    if tape.used:
        raise ContractViolation("gradient tape is single-use")
    tape.used = True

    outputs, grads_out = [], []
    for name in upstream:
        if name not in _CHANNELS:
            raise ContractViolation(f"unknown output channel {name!r}")
        out_t = getattr(tape.output, name)
        if out_t is None:
            raise ContractViolation(f"channel {name!r} was not rendered")
        g = torch.as_tensor(upstream[name], dtype=out_t.dtype)
        if g.shape != out_t.shape:
            raise ContractViolation(
                f"upstream for {name!r} has shape {tuple(g.shape)}, expected {tuple(out_t.shape)}")
        outputs.append(out_t)
        grads_out.append(g)

    live = {name: t for name, t in tape.inputs.items() if t.requires_grad}
    if live and outputs and any(o.requires_grad for o in outputs):
        grads = torch.autograd.grad(outputs, list(live.values()), grad_outputs=grads_out,
                                    allow_unused=True, retain_graph=False)
        live_grads = dict(zip(live.keys(), grads))
    else:
        live_grads = {}
    return {name: (live_grads.get(name) if live_grads.get(name) is not None
                   else torch.zeros_like(t))
            for name, t in tape.inputs.items()}


def render_reprojected(gaussians_ref, gaussians_t, camera_ref: Camera, camera_t: Camera,
                       attribute_kind: str, options: RenderOptions | None = None) -> RenderOutput:
    """Composite time-t attributes at the footprint the Gaussians hold in the
    reference view.

    Weights (2D footprints, depth order, per-pixel alphas) come entirely from
    `gaussians_ref` under `camera_ref`; the composited attribute is, per
    Gaussian, its camera-space depth under `camera_t` (`depth_at_t`) or its
    projected pixel position under `camera_t` (`pixel_at_t`).
    """
    opts = options or RenderOptions()
    if isinstance(gaussians_ref, list):
        gaussians_ref = GaussianBatch.from_gaussians(gaussians_ref, dtype=opts.dtype)
    if isinstance(gaussians_t, list):
        gaussians_t = GaussianBatch.from_gaussians(gaussians_t, dtype=opts.dtype)
    if gaussians_ref.n != gaussians_t.n:
        raise ContractViolation(
            f"reference and deformed sets must be index-aligned "
            f"({gaussians_ref.n} vs {gaussians_t.n})")

    cam_t = CameraTensors(camera_t, dtype=gaussians_t.means.dtype)
    px_t, z_t = cam_t.project_points(gaussians_t.means)
    if attribute_kind == "depth_at_t":
        attr = z_t.unsqueeze(-1)
    elif attribute_kind == "pixel_at_t":
        attr = px_t
    else:
        raise ContractViolation(f"unknown attribute_kind {attribute_kind!r}")
    out, _ = splat_forward(gaussians_ref, camera_ref, attribute=attr, options=opts)
    return out


class AttributeCompositor:
    """Frozen reference-frame compositing weights for repeated attribute renders.

    When the reference geometry and camera never change (the training loop),
    the sorted contribution list and its weights can be precomputed once;
    compositing a new per-Gaussian attribute is then a single scatter-add.
    """

    def __init__(self, gaussians_ref: GaussianBatch, camera_ref: Camera,
                 options: RenderOptions | None = None):
        opts = options or RenderOptions()
        ref = gaussians_ref.detach()
        cam = CameraTensors(camera_ref, dtype=ref.means.dtype)
        self.h, self.w = cam.height, cam.width
        self.n = ref.n
        self.dtype = ref.means.dtype
        pix_s, g_s, weight, _, _ = _entry_list(ref, cam, opts)
        self.pix_s, self.g_s, self.weight = pix_s, g_s, weight.detach()
        self.alpha = torch.zeros(self.h * self.w, dtype=self.dtype).index_add(
            0, self.pix_s, self.weight).view(self.h, self.w)

    def composite(self, attribute: torch.Tensor) -> torch.Tensor:
        """(N, A) per-Gaussian attribute -> (H, W, A) composited map."""
        if attribute.shape[0] != self.n:
            raise ContractViolation(
                f"attribute rows {attribute.shape[0]} != reference count {self.n}")
        a = attribute.shape[1]
        flat = torch.zeros(self.h * self.w, a, dtype=self.dtype).index_add(
            0, self.pix_s, self.weight.unsqueeze(-1) * attribute[self.g_s])
        return flat.view(self.h, self.w, a)


def naive_composite(gaussians: list[Gaussian3D], camera: Camera,
                    attribute: np.ndarray | None = None,
                    lowpass: float = LOWPASS) -> dict:
    """Exhaustive reference compositor in numpy: every Gaussian evaluated at
    every pixel, exact depth sort, no footprint culling, no early exit."""
    h, w = camera.height, camera.width
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    alpha = np.zeros((h, w))
    attr2d = None
    if attribute is not None:
        attr2d = np.asarray(attribute, dtype=np.float64)
        if attr2d.ndim == 1:
            attr2d = attr2d[:, None]
    attr_map = None if attr2d is None else np.zeros((h, w, attr2d.shape[1]))
    trans = np.ones((h, w))

    rot = camera.world_to_cam.matrix()[:3, :3]
    t = camera.world_to_cam.translation
    f = camera.focal
    pp = camera.principal_point

    entries = []
    for i, g in enumerate(gaussians):
        pc = rot @ g.mean + t
        if pc[2] <= ZNEAR or g.opacity < MIN_OPACITY:
            continue
        entries.append((pc[2], i, pc))
    entries.sort(key=lambda e: (e[0], e[1]))

    ys, xs = np.mgrid[0:h, 0:w]
    cxs = xs + 0.5
    cys = ys + 0.5
    for z, i, pc in entries:
        g = gaussians[i]
        px = pp + f * pc[:2] / z
        cov = rot @ g.covariance() @ rot.T
        j = np.array([[f / z, 0.0, -f * pc[0] / z**2],
                      [0.0, f / z, -f * pc[1] / z**2]])
        c2 = j @ cov @ j.T + lowpass * np.eye(2)
        eigs = np.linalg.eigvalsh(c2)
        if eigs[1] / max(eigs[0], 1e-30) > COND_MAX:
            continue
        inv = np.linalg.inv(c2)
        dx = cxs - px[0]
        dy = cys - px[1]
        power = -0.5 * (inv[0, 0] * dx * dx + 2 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy)
        a = np.minimum(g.opacity * np.exp(power), ALPHA_CLAMP)
        wgt = a * trans
        color += wgt[..., None] * g.color
        depth += wgt * z
        alpha += wgt
        if attr_map is not None:
            attr_map += wgt[..., None] * attr2d[i]
        trans = trans * (1.0 - a)

    out = dict(color=color, depth=depth, alpha=alpha, transmittance=1.0 - alpha)
    if attr_map is not None:
        out["attribute"] = attr_map
    return out
