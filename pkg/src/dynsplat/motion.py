"""Deformation models: a convolutional encoder-decoder over canonical position
grids (the main motion prior), a per-pixel MLP, and a direct deformation table.

All variants output 7 channels per grid pixel: a quaternion residual added to
the identity rotation, and a translation. Zero-initialized output heads make
every freshly built model predict the exact identity deformation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .config import MotionNetConfig
from .renderer import GaussianBatch
from .tgeom import quat_multiply_t, quat_normalize_t, quat_rotate_t

DOWN_FACTOR = 16  # four stride-2 encoder blocks


@dataclass
class DeformationField:
    """Per-pixel 6-DOF deformation for one grid at one timestep."""

    quaternion: torch.Tensor   # (H, W, 4), normalized on application
    translation: torch.Tensor  # (H, W, 3)


def positional_encode(t: int, total: int, frequencies: int = 4,
                      dtype=torch.float64) -> torch.Tensor:
    """Sin/cos encoding of the normalized timestep, 2*frequencies channels.

    t runs over 1..total; the normalized position is (t-1)/(total-1), or 0
    when the sequence has a single frame.
    """
    if not 1 <= t <= total:
        raise ValueError(f"timestep {t} outside 1..{total}")
    that = 0.0 if total == 1 else (t - 1) / (total - 1)
    out = []
    for k in range(frequencies):
        arg = (2.0**k) * math.pi * that
        out.extend([math.sin(arg), math.cos(arg)])
    return torch.tensor(out, dtype=dtype)


class PartialConv2d(nn.Module):
    """Convolution over masked grids; invalid positions never leak into valid
    outputs. Windows with no valid input emit 0 and mask 0; otherwise the raw
    response is rescaled by (window size / valid count) before the bias."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.stride = stride
        self.padding = kernel // 2
        self.win = float(kernel * kernel)
        self.register_buffer("ones", torch.ones(1, 1, kernel, kernel))

    def forward(self, x: torch.Tensor, mask: torch.Tensor):
        with torch.no_grad():
            msum = nn.functional.conv2d(mask, self.ones.to(mask.dtype),
                                        stride=self.stride, padding=self.padding)
            holes = msum == 0
            mult = torch.where(holes, torch.zeros_like(msum), self.win / msum.clamp(min=1.0))
            mask_out = (~holes).to(mask.dtype)
        raw = nn.functional.conv2d(x * mask, self.weight,
                                   stride=self.stride, padding=self.padding)
        out = (raw * mult + self.bias.view(1, -1, 1, 1)) * mask_out
        return out, mask_out


class MaskedChannelNorm(nn.Module):
    """Per-channel normalization over valid spatial positions (batch size 1
    batch-norm degenerates to exactly this), with a learned affine."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        count = mask.sum(dim=(0, 2, 3)).clamp(min=1.0)
        mean = (x * mask).sum(dim=(0, 2, 3)) / count
        centered = (x - mean.view(1, -1, 1, 1)) * mask
        var = centered.pow(2).sum(dim=(0, 2, 3)) / count
        normed = centered / torch.sqrt(var + self.eps).view(1, -1, 1, 1)
        return (normed * self.gamma.view(1, -1, 1, 1) + self.beta.view(1, -1, 1, 1)) * mask


class _Block(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int, slope: float, kernel: int):
        super().__init__()
        self.conv = PartialConv2d(in_ch, out_ch, kernel, stride)
        self.norm = MaskedChannelNorm(out_ch)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x, mask):
        y, m = self.conv(x, mask)
        return self.act(self.norm(y, m)), m


class MotionCNN(nn.Module):
    """U-Net style encoder-decoder over (position, validity, time) grids.

    Encoder blocks downsample by stride-2 partial convolutions; the decoder
    mirrors them with nearest-neighbor upsampling. Skip connections are 1x1
    partial convolutions whose outputs concatenate onto the upsampled decoder
    input before each decoder convolution.
    """

    def __init__(self, cfg: MotionNetConfig):
        super().__init__()
        self.cfg = cfg
        in_ch = 3 + 1 + 2 * cfg.pe_frequencies
        widths = list(cfg.encoder_widths)
        self.encoders = nn.ModuleList()
        prev = in_ch
        for wd in widths:
            self.encoders.append(_Block(prev, wd, 2, cfg.leaky_slope, cfg.kernel))
            prev = wd
        # skip sources: the input and all encoder outputs except the bottleneck
        skip_srcs = [in_ch] + widths[:-1]
        self.skips = nn.ModuleList(
            [PartialConv2d(c, cfg.skip_width, kernel=1) for c in skip_srcs])
        dec_out = widths[-2::-1] + [widths[0]]  # mirror, e.g. [128, 32, 16] + [16]
        self.decoders = nn.ModuleList()
        prev = widths[-1]
        for wd in dec_out:
            self.decoders.append(_Block(prev + cfg.skip_width, wd, 1,
                                        cfg.leaky_slope, cfg.kernel))
            prev = wd
        self.head = nn.Conv2d(prev, 7, kernel_size=1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor):
        """(1, C, H, W) + (1, 1, H, W) -> ((1, 7, H, W), pre-head features)."""
        h, w = x.shape[-2:]
        ph = (DOWN_FACTOR - h % DOWN_FACTOR) % DOWN_FACTOR
        pw = (DOWN_FACTOR - w % DOWN_FACTOR) % DOWN_FACTOR
        if ph or pw:
            x = nn.functional.pad(x, (0, pw, 0, ph))
            mask = nn.functional.pad(mask, (0, pw, 0, ph))

        feats = [x]
        masks = [mask]
        for enc in self.encoders:
            f, m = enc(feats[-1], masks[-1])
            feats.append(f)
            masks.append(m)

        y = feats[-1]
        my = masks[-1]
        for level, dec in enumerate(self.decoders):
            lvl = len(self.encoders) - 1 - level  # resolution level of the skip source
            y = nn.functional.interpolate(y, scale_factor=2, mode="nearest")
            my = nn.functional.interpolate(my, scale_factor=2, mode="nearest")
            skip, ms = self.skips[lvl](feats[lvl], masks[lvl])
            m_join = torch.maximum(my, ms)
            y, my = dec(torch.cat([y, skip], dim=1), m_join)

        out = self.head(y) * my
        if ph or pw:
            out = out[..., :h, :w]
            y = y[..., :h, :w]
        return out, y


class MotionMLP(nn.Module):
    """Per-pixel baseline: an MLP on (position, time encoding)."""

    def __init__(self, cfg: MotionNetConfig):
        super().__init__()
        dims = [3 + 2 * cfg.pe_frequencies, *cfg.mlp_widths]
        self.layers = nn.ModuleList(
            [nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:])])
        self.act = nn.LeakyReLU(cfg.leaky_slope)
        self.head = nn.Linear(dims[-1], 7)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = self.act(layer(x))
        return self.head(x)


class MotionModel:
    """Deformation predictor shared by every grid; variant cnn | mlp |
    direct_grid. direct_grid optimizes a raw per-(view, timestep, pixel)
    table instead of network weights."""

    def __init__(self, variant: str = "cnn", cfg: MotionNetConfig | None = None,
                 seed: int = 0, grid_shape: tuple[int, int] | None = None,
                 n_views: int = 1, total_timesteps: int = 1,
                 dtype=torch.float64):
        if variant not in ("cnn", "mlp", "direct_grid"):
            raise ValueError(f"unknown motion model variant {variant!r}")
        self.variant = variant
        self.cfg = cfg or MotionNetConfig()
        self.seed = seed
        self.dtype = dtype
        if variant == "cnn":
            self.net = MotionCNN(self.cfg).to(dtype)
        elif variant == "mlp":
            self.net = MotionMLP(self.cfg).to(dtype)
        else:
            if grid_shape is None:
                raise ValueError("direct_grid requires grid_shape")
            h, w = grid_shape
            self.table = nn.Parameter(
                torch.zeros(n_views, total_timesteps, 7, h, w, dtype=dtype))
        init_identity(self)

    def parameters(self):
        if self.variant == "direct_grid":
            return [self.table]
        return list(self.net.parameters())

    def named_parameters(self) -> dict:
        if self.variant == "direct_grid":
            return {"table": self.table}
        return dict(self.net.named_parameters())

    def forward(self, grid, t: int, total: int) -> DeformationField:
        """Predict the deformation of one grid at timestep t (1-based)."""
        positions = grid.positions
        validity = grid.validity
        h, w = positions.shape[:2]
        if self.variant == "direct_grid":
            raw = self.table[grid.view_index, t - 1].permute(1, 2, 0)
        elif self.variant == "mlp":
            pe = positional_encode(t, total, self.cfg.pe_frequencies, self.dtype)
            flat = torch.cat([positions.reshape(-1, 3),
                              pe.expand(h * w, pe.numel())], dim=1)
            raw = self.net(flat).reshape(h, w, 7)
        else:
            pe = positional_encode(t, total, self.cfg.pe_frequencies, self.dtype)
            x = torch.cat([
                positions.permute(2, 0, 1),
                validity.to(self.dtype).unsqueeze(0),
                pe.view(-1, 1, 1).expand(pe.numel(), h, w),
            ], dim=0).unsqueeze(0)
            mask = validity.to(self.dtype).view(1, 1, h, w)
            raw, _ = self.net(x, mask)
            raw = raw[0].permute(1, 2, 0)

        identity = torch.zeros(4, dtype=self.dtype)
        identity[0] = 1.0
        quat = quat_normalize_t(identity + raw[..., :4])
        return DeformationField(quaternion=quat, translation=raw[..., 4:])


def init_identity(model: MotionModel) -> MotionModel:
    """Seeded random init for the trunk, zeros for the output head, so the
    forward output is exactly the identity deformation."""
    gen = torch.Generator().manual_seed(model.seed)

    def rand_init(module):
        for p in module.parameters():
            if p.ndim >= 2:
                fan_in = p[0].numel()
                p.data = torch.randn(p.shape, generator=gen, dtype=p.dtype) \
                    * math.sqrt(2.0 / fan_in)
            else:
                p.data.zero_()

    if model.variant == "direct_grid":
        model.table.data.zero_()
        return model
    if model.variant == "mlp":
        rand_init(model.net.layers)
        model.net.head.weight.data.zero_()
        model.net.head.bias.data.zero_()
        return model
    for block in list(model.net.encoders) + list(model.net.decoders):
        rand_init(block.conv)
        block.norm.gamma.data.fill_(1.0)
        block.norm.beta.data.zero_()
    for skip in model.net.skips:
        rand_init(skip)
    model.net.head.weight.data.zero_()
    model.net.head.bias.data.zero_()
    return model


def apply_deformation(grid, field: DeformationField) -> GaussianBatch:
    """Deform a grid's valid Gaussians: mean -> rot(mean, Q) + Delta about the
    world origin, orientation -> Q composed onto the canonical rotation;
    scale/opacity/color/feature carry over unchanged."""
    valid = grid.validity.reshape(-1).bool()
    q = field.quaternion.reshape(-1, 4)[valid]
    dq = quat_normalize_t(q)
    pos = grid.positions.reshape(-1, 3)[valid]
    moved = quat_rotate_t(dq, pos) + field.translation.reshape(-1, 3)[valid]
    base = grid.gaussian_batch()
    rot = quat_multiply_t(dq, base.quats)
    return GaussianBatch(means=moved, scales=base.scales, quats=rot,
                         opacities=base.opacities, colors=base.colors,
                         features=base.features, fg_probs=base.fg_probs)
