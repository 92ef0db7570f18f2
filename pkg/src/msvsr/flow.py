"""Optical flow: bilinear backward warping and a coarse-to-fine pyramid estimator.

Flow fields are ``(B, 2, H, W)`` tensors, channel 0 holding the horizontal
displacement ``dx`` and channel 1 the vertical ``dy``, both in pixels. A flow
maps coordinates of the current frame to the frame being sampled:
``warp(src, flow)(p) = src(p + flow(p))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch


@dataclass(frozen=True)
class FlowPyramidConfig:
    n_levels: int = 5
    base_channels: int = 32
    kernel_size: int = 7

    def __post_init__(self):
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ValueError("base_channels must be an even number >= 2")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")


def bilinear_sample(src: torch.Tensor, px: torch.Tensor, py: torch.Tensor) -> torch.Tensor:
    """Sample ``src`` (B, C, H, W) at fractional pixel positions.

    ``px`` and ``py`` have shape (B, P). Corners that fall outside the image
    contribute zero. Returns a (B, C, P) tensor. At integer positions the
    result is bit-identical to indexing, since the other three corners carry
    an exact zero weight.
    """
    b, c, h, w = src.shape
    flat = src.reshape(b, c, h * w)
    x0 = torch.floor(px)
    y0 = torch.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.long()
    y0 = y0.long()
    out = torch.zeros(b, c, px.shape[1], dtype=src.dtype, device=src.device)
    for xi, wx in ((x0, 1 - fx), (x0 + 1, fx)):
        for yi, wy in ((y0, 1 - fy), (y0 + 1, fy)):
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)
            vals = torch.gather(flat, 2, idx.unsqueeze(1).expand(b, c, idx.shape[1]))
            out = out + vals * (wx * wy * valid).unsqueeze(1)
    return out


def pixel_grid(h: int, w: int, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=like.dtype, device=like.device),
        torch.arange(w, dtype=like.dtype, device=like.device),
        indexing="ij",
    )
    return xs, ys


def warp(src: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp ``src`` (B, C, H, W) with ``flow`` (B, 2, H, W), zero padding outside."""
    if src.dim() != 4 or flow.dim() != 4 or flow.shape[1] != 2:
        raise ShapeMismatch(f"warp expects (B, C, H, W) and (B, 2, H, W), got {tuple(src.shape)}, {tuple(flow.shape)}")
    b, c, h, w = src.shape
    if flow.shape[0] != b or flow.shape[2:] != (h, w):
        raise ShapeMismatch(f"flow {tuple(flow.shape)} does not match source {tuple(src.shape)}")
    xs, ys = pixel_grid(h, w, src)
    px = (xs + flow[:, 0]).reshape(b, -1)
    py = (ys + flow[:, 1]).reshape(b, -1)
    return bilinear_sample(src, px, py).reshape(b, c, h, w)


class FlowLevel(nn.Module):
    """Five-layer convolutional refinement for one pyramid level.

    Input is ``cat(ref, warp(sup, flow), flow)`` (8 channels); output is a
    residual flow.
    """

    def __init__(self, base_channels: int, kernel_size: int = 7):
        super().__init__()
        b = base_channels
        widths = [8, b, 2 * b, b, b // 2, 2]
        pad = kernel_size // 2
        self.convs = nn.ModuleList(
            nn.Conv2d(cin, cout, kernel_size, 1, pad) for cin, cout in zip(widths[:-1], widths[1:])
        )

    @property
    def head(self) -> nn.Conv2d:
        return self.convs[-1]

    def forward(self, x):
        for conv in self.convs[:-1]:
            x = F.relu(conv(x))
        return self.convs[-1](x)


class FlowNet(nn.Module):
    """Coarse-to-fine pyramid flow estimator in the style of SPyNet.

    Each level predicts a residual that is added to the 2x-upsampled,
    2x-scaled flow of the coarser level; the coarsest level starts from zero.
    """

    def __init__(self, cfg: FlowPyramidConfig = FlowPyramidConfig()):
        super().__init__()
        self.cfg = cfg
        self.levels = nn.ModuleList(FlowLevel(cfg.base_channels, cfg.kernel_size) for _ in range(cfg.n_levels))

    def forward(self, ref: torch.Tensor, sup: torch.Tensor) -> torch.Tensor:
        """Estimate flow such that ``warp(sup, flow)`` approximates ``ref``.

        Args:
            ref: (B, 3, H, W) frames in whose coordinates the flow is expressed.
            sup: (B, 3, H, W) frames to be sampled.

        Returns:
            Tensor: flow of shape (B, 2, H, W).
        """
        if ref.shape != sup.shape or ref.dim() != 4:
            raise ShapeMismatch(f"ref {tuple(ref.shape)} and sup {tuple(sup.shape)} must match")
        h, w = ref.shape[-2:]
        m = 2 ** (self.cfg.n_levels - 1)
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            ref = F.pad(ref, (0, pw, 0, ph), mode="replicate")
            sup = F.pad(sup, (0, pw, 0, ph), mode="replicate")

        refs, sups = [ref], [sup]
        for _ in range(self.cfg.n_levels - 1):
            refs.append(F.avg_pool2d(refs[-1], 2))
            sups.append(F.avg_pool2d(sups[-1], 2))

        coarse = refs[-1]
        flow = coarse.new_zeros(coarse.shape[0], 2, *coarse.shape[-2:])
        for level, r, s in zip(self.levels, reversed(refs), reversed(sups)):
            if flow.shape[-2:] != r.shape[-2:]:
                flow = 2.0 * F.interpolate(flow, size=r.shape[-2:], mode="bilinear", align_corners=True)
            flow = flow + level(torch.cat([r, warp(s, flow), flow], dim=1))
        return flow[:, :, :h, :w]


def estimate_flow(ref: torch.Tensor, sup: torch.Tensor, net: FlowNet) -> torch.Tensor:
    return net(ref, sup)


def fit_flow(net: FlowNet, ref: torch.Tensor, sup: torch.Tensor, iters: int = 300, lr: float = 1e-3, eps: float = 1e-6):
    """Fit ``net`` to a fixed frame set with a photometric Charbonnier loss.

    Used to give the pyramid a sensible starting point on desk-scale data;
    returns the per-step loss values.
    """
    opt = torch.optim.Adam(net.parameters(), lr=lr, betas=(0.9, 0.99))
    history = []
    for _ in range(iters):
        opt.zero_grad()
        diff = warp(sup, net(ref, sup)) - ref
        loss = torch.sqrt(diff * diff + eps).mean()
        loss.backward()
        opt.step()
        history.append(loss.item())
    return history
