"""Two-expert image model: generators, pixel re-assignment, gating and responsibilities.

Tensors follow torch conventions: images are (B, C, H, W), re-assignment grids
are (B, H, W, 2) holding normalized (x, y) source coordinates in [-1, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .errors import ConfigurationError
from .latent_prior import LatentLayout, orthogonal_init_

_SNAP = 1e-9


def identity_grid(batch, height, width, dtype=torch.float32, device=None):
    """Grid whose resampling is the identity (pixel centers at the span ends)."""
    ys = _centers(height, dtype, device)
    xs = _centers(width, dtype, device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1).expand(batch, height, width, 2).contiguous()


def _centers(n, dtype, device):
    if n == 1:
        return torch.zeros(1, dtype=dtype, device=device)
    return torch.linspace(-1.0, 1.0, n, dtype=dtype, device=device)


def _source_coords(g, n):
    # [-1, 1] -> [0, n-1], clamped to the border pixel
    pos = ((g + 1.0) * (0.5 * (n - 1))).clamp(0.0, n - 1)
    nearest = torch.round(pos)
    on_pixel = (pos - nearest).abs() < _SNAP
    lo = torch.where(on_pixel, nearest, torch.floor(pos))
    frac = pos - lo
    # coordinates that land on a pixel center get an exactly-zero weight for
    # the neighbour (value 0, gradient kept) so identity resampling is exact
    frac = torch.where(on_pixel, frac - frac.detach(), frac)
    lo = lo.long()
    hi = (lo + 1).clamp(max=n - 1)
    return lo, hi, frac


def resample(image: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Bilinear resampling of ``image`` at the normalized coordinates in ``grid``.

    Differentiable in both arguments. Out-of-range coordinates clamp to the
    border pixel.
    """
    b, c, h, w = image.shape
    if grid.shape != (b, h, w, 2):
        raise ConfigurationError(f"grid shape {tuple(grid.shape)} does not match image {tuple(image.shape)}")
    x0, x1, fx = _source_coords(grid[..., 0], w)
    y0, y1, fy = _source_coords(grid[..., 1], h)
    flat = image.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, c, h * w)
        return torch.gather(flat, 2, idx).reshape(b, c, h, w)

    fx = fx.unsqueeze(1)
    fy = fy.unsqueeze(1)
    top = gather(y0, x0) * (1 - fx) + gather(y0, x1) * fx
    bottom = gather(y1, x0) * (1 - fx) + gather(y1, x1) * fx
    return top * (1 - fy) + bottom * fy


def gating(fg_logit, bg_logit):
    """Per-pixel two-way softmax; returns (pi_f, pi_b)."""
    if fg_logit.shape != bg_logit.shape:
        raise ConfigurationError("gating logits must have equal shapes")
    pi = torch.softmax(torch.stack([fg_logit, bg_logit]), dim=0)
    return pi[0], pi[1]


def region_loglik(region_rgb, x, sigma=0.3, norm="l1"):
    """Per-pixel log-likelihood map, -d(region, x) / (2 sigma^2), shape (B, 1, H, W).

    ``d`` is the channel-summed L1 or squared-L2 distance; constants dropped.
    """
    diff = region_rgb - x
    d = diff.abs() if norm == "l1" else diff.square()
    return -d.sum(dim=1, keepdim=True) / (2.0 * sigma ** 2)


@torch.no_grad()
def responsibilities(pi_f, pi_b, ll_f, ll_b, epsilon=1e-8):
    """Foreground posterior responsibility, treated as a constant.

    Equals pi_f p_f / (pi_f p_f + pi_b p_b + eps) with p = exp(ll), evaluated
    after factoring out the per-pixel maximum log-likelihood.
    """
    m = torch.maximum(ll_f, ll_b)
    a = pi_f * torch.exp(ll_f - m)
    b = pi_b * torch.exp(ll_b - m)
    guard = epsilon * torch.exp(-m) if epsilon else 0.0
    return (a / (a + b + guard)).detach()


def compose(fg_rgb, bg_rgb, pi_f, pi_b):
    return fg_rgb * pi_f + bg_rgb * pi_b


class GeneratorNet(nn.Module):
    """DCGAN-style generator: linear -> 4x4 base -> upsample/conv/instance-norm blocks -> conv.

    ``cond_channels`` > 0 concatenates an external feature map (at half the
    output resolution) in front of the last block.
    """

    def __init__(self, z_dim, out_channels, image_size, base_channels, channels,
                 slope=0.01, cond_channels=0):
        super().__init__()
        n_blocks = int(math.log2(image_size // 4))
        if 4 * 2 ** n_blocks != image_size or len(channels) != n_blocks:
            raise ConfigurationError(
                f"image_size {image_size} needs {n_blocks} upsample blocks, got {len(channels)} widths"
            )
        self.z_dim = z_dim
        self.base_channels = base_channels
        self.fc = nn.Linear(z_dim, base_channels * 16)
        self.act = nn.LeakyReLU(slope)
        blocks = []
        width = base_channels
        for i, ch in enumerate(channels):
            if i == n_blocks - 1:
                width += cond_channels
            blocks.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(width, ch, 3, 1, 1),
                nn.InstanceNorm2d(ch, affine=True),
                nn.LeakyReLU(slope),
            ))
            width = ch
        self.blocks = nn.ModuleList(blocks)
        self.out = nn.Conv2d(width, out_channels, 3, 1, 1)
        self.feature_channels = channels[-2] if n_blocks > 1 else base_channels
        orthogonal_init_(self)

    def forward(self, z, cond=None):
        """Returns (output map, penultimate feature map)."""
        if z.shape[-1] != self.z_dim:
            raise ConfigurationError(f"generator expects latent dim {self.z_dim}, got {z.shape[-1]}")
        h = self.act(self.fc(z)).view(z.shape[0], self.base_channels, 4, 4)
        penultimate = h
        for i, block in enumerate(self.blocks):
            if i == len(self.blocks) - 1:
                penultimate = h
                if cond is not None:
                    h = torch.cat([h, cond], dim=1)
            h = block(h)
        return self.out(h), penultimate

    def conv_layers(self):
        return [m for m in self.modules() if isinstance(m, nn.Conv2d)]


@dataclass
class MixtureOutput:
    fg_rgb: torch.Tensor
    fg_logit: torch.Tensor
    bg_rgb: torch.Tensor
    bg_logit: torch.Tensor
    grid: torch.Tensor
    bg_rgb_reassigned: torch.Tensor
    bg_logit_reassigned: torch.Tensor
    pi_f: torch.Tensor
    pi_b: torch.Tensor
    composed: torch.Tensor
    ll_f: Optional[torch.Tensor] = None
    ll_b: Optional[torch.Tensor] = None
    gamma_f: Optional[torch.Tensor] = None


class MixtureModel(nn.Module):
    """Foreground generator, background generator and the re-assignment generator."""

    def __init__(self, layout: LatentLayout, image_size, base_channels, channels, slope=0.01,
                 sigma=0.3, norm="l1", epsilon=1e-8, reassign=True):
        super().__init__()
        self.layout = layout
        self.image_size = image_size
        self.sigma = sigma
        self.norm = norm
        self.epsilon = epsilon
        self.reassign = reassign
        dims = layout.dims
        self.fg_net = GeneratorNet(dims["foreground"], 4, image_size, base_channels, channels, slope)
        self.bg_net = GeneratorNet(dims["background"], 4, image_size, base_channels, channels, slope)
        self.pix_net = GeneratorNet(dims["reassignment"], 2, image_size, base_channels, channels, slope,
                                    cond_channels=self.bg_net.feature_channels)

    @classmethod
    def from_config(cls, cfg):
        mc = cfg.model
        layout = LatentLayout(mc.z_fg, mc.z_bg, mc.z_pix)
        return cls(layout, mc.image_size, mc.gen_base_channels, tuple(mc.gen_channels), mc.gen_slope,
                   cfg.recon.sigma, cfg.recon.norm, cfg.recon.epsilon,
                   reassign=not cfg.train.disable_reassignment)

    def generate_foreground(self, z1):
        out, _ = self.fg_net(z1)
        return torch.tanh(out[:, :3]), out[:, 3:4]

    def generate_background(self, z2, z_pix, feature=None):
        """Returns (bg_rgb, bg_logit, grid, bg_rgb_reassigned, bg_logit_reassigned).

        The re-assignment net sees the background feature map as a constant;
        ``feature`` substitutes a fixed map for it (used by gradient checks).
        """
        out, feat = self.bg_net(z2)
        bg_rgb, bg_logit = torch.tanh(out[:, :3]), out[:, 3:4]
        if self.reassign:
            cond = feat if feature is None else feature
            grid_map, _ = self.pix_net(z_pix, cond=cond.detach())
            grid = grid_map.permute(0, 2, 3, 1)
            return bg_rgb, bg_logit, grid, resample(bg_rgb, grid), resample(bg_logit, grid)
        b, _, h, w = bg_rgb.shape
        grid = identity_grid(b, h, w, dtype=bg_rgb.dtype, device=bg_rgb.device)
        return bg_rgb, bg_logit, grid, bg_rgb, bg_logit

    def background_feature(self, z):
        return self.bg_net(self.layout.split(z)["background"])[1].detach()

    def forward(self, z, x=None, feature=None) -> MixtureOutput:
        """Decode latents; if ``x`` is given also fill log-likelihoods and responsibilities."""
        parts = self.layout.split(z)
        fg_rgb, fg_logit = self.generate_foreground(parts["foreground"])
        bg_rgb, bg_logit, grid, bg_re, bg_logit_re = self.generate_background(
            parts["background"], parts["reassignment"], feature)
        pi_f, pi_b = gating(fg_logit, bg_logit_re)
        out = MixtureOutput(fg_rgb, fg_logit, bg_rgb, bg_logit, grid, bg_re, bg_logit_re,
                            pi_f, pi_b, compose(fg_rgb, bg_re, pi_f, pi_b))
        if x is not None:
            out.ll_f = region_loglik(fg_rgb, x, self.sigma, self.norm)
            out.ll_b = region_loglik(bg_re, x, self.sigma, self.norm)
            out.gamma_f = responsibilities(pi_f, pi_b, out.ll_f, out.ll_b, self.epsilon)
        return out

    def image_generator_convs(self):
        """Conv layers of the foreground and background image generators."""
        return self.fg_net.conv_layers() + self.bg_net.conv_layers()


def expected_complete_loglik(mix: MixtureOutput, gamma_f, epsilon=1e-8):
    """Per-pixel γ-weighted complete-data log-likelihood, shape (B, 1, H, W)."""
    return (gamma_f * (torch.log(mix.pi_f + epsilon) + mix.ll_f)
            + (1.0 - gamma_f) * (torch.log(mix.pi_b + epsilon) + mix.ll_b))
