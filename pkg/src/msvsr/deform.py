"""Modulated deformable convolution and the alignment modules built on it.

Offset layout: ``offsets`` has ``2 * K * K * G`` channels, read as
``(G, K*K, 2)`` with the last axis holding ``(dx, dy)`` in pixels, the same
order as flow fields. ``masks`` has ``K * K * G`` channels read as
``(G, K*K)``. Tap ``k`` sits at kernel row ``k // K`` and column ``k % K``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvariantViolation, ShapeMismatch
from .flow import bilinear_sample, pixel_grid, warp


@dataclass
class AlignmentParams:
    offsets: torch.Tensor  # (B, 2*K*K*G, H, W)
    masks: torch.Tensor  # (B, K*K*G, H, W), values in [0, 1]

    @property
    def taps(self) -> int:
        """Number of (kernel tap, deformable group) pairs, K*K*G."""
        return self.masks.shape[1]

    def detach(self) -> "AlignmentParams":
        return AlignmentParams(self.offsets.detach(), self.masks.detach())


def default_deformable_groups(channels: int) -> int:
    return 8 if channels >= 32 else 1


def _check_deform_args(x, offsets, masks, weight, groups, deformable_groups):
    if x.dim() != 4 or weight.dim() != 4:
        raise ShapeMismatch("deform_conv expects 4-d input and weight")
    b, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeMismatch(f"kernel must be square with odd size, got {kh}x{kw}")
    if cin % groups or cout % groups or cin_g != cin // groups:
        raise ShapeMismatch(f"channels {cin}->{cout} incompatible with groups={groups} and weight {tuple(weight.shape)}")
    if cin % deformable_groups:
        raise ShapeMismatch(f"{cin} channels not divisible by {deformable_groups} deformable groups")
    taps = kh * kw * deformable_groups
    if offsets.shape != (b, 2 * taps, h, w):
        raise ShapeMismatch(f"offsets must be {(b, 2 * taps, h, w)}, got {tuple(offsets.shape)}")
    if masks.shape != (b, taps, h, w):
        raise ShapeMismatch(f"masks must be {(b, taps, h, w)}, got {tuple(masks.shape)}")
    if masks.numel() and (masks.min() < 0 or masks.max() > 1):
        raise InvariantViolation("modulation masks must lie in [0, 1]")


def kernel_taps(k: int, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Regular-grid displacements (rx, ry) of the K*K taps, row-major."""
    r = torch.arange(k, dtype=like.dtype, device=like.device) - k // 2
    ry, rx = torch.meshgrid(r, r, indexing="ij")
    return rx.reshape(-1), ry.reshape(-1)


def deform_conv(
    x: torch.Tensor,
    offsets: torch.Tensor,
    masks: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    groups: int = 1,
    deformable_groups: int = 1,
) -> torch.Tensor:
    """Modulated deformable convolution, stride 1, 'same' padding.

    ``out(p) = sum_k w_k * m_k(p) * x(p + r_k + offset_k(p))`` with bilinear
    sampling and zero padding outside the feature map. Differentiable with
    respect to every tensor argument through autograd.
    """
    _check_deform_args(x, offsets, masks, weight, groups, deformable_groups)
    b, cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    kk = k * k
    g = deformable_groups
    hw = h * w

    xs, ys = pixel_grid(h, w, x)
    rx, ry = kernel_taps(k, x)
    off = offsets.view(b, g, kk, 2, h, w)
    px = xs + rx.view(1, 1, kk, 1, 1) + off[:, :, :, 0]
    py = ys + ry.view(1, 1, kk, 1, 1) + off[:, :, :, 1]

    xg = x.reshape(b * g, cin // g, h, w)
    if h > 1 and w > 1:
        # grid_sample with align_corners=True and zero padding follows the same
        # per-corner contract as bilinear_sample and is much faster on CPU
        grid = torch.stack([px * (2.0 / (w - 1)) - 1.0, py * (2.0 / (h - 1)) - 1.0], dim=-1)
        sampled = F.grid_sample(
            xg, grid.reshape(b * g, kk * h, w, 2), mode="bilinear", padding_mode="zeros", align_corners=True
        )
    else:
        sampled = bilinear_sample(xg, px.reshape(b * g, kk * hw), py.reshape(b * g, kk * hw))
    sampled = sampled.reshape(b, g, cin // g, kk, hw) * masks.view(b, g, 1, kk, hw)
    cols = sampled.reshape(b, groups, (cin // groups) * kk, hw)
    wt = weight.reshape(groups, cout // groups, (cin // groups) * kk)
    out = torch.matmul(wt, cols).reshape(b, cout, h, w)
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


def _bilinear_scalar(img: np.ndarray, y: float, x: float) -> float:
    h, w = img.shape
    x0, y0 = math.floor(x), math.floor(y)
    fx, fy = x - x0, y - y0
    total = 0.0
    for yi, wy in ((y0, 1.0 - fy), (y0 + 1, fy)):
        for xi, wx in ((x0, 1.0 - fx), (x0 + 1, fx)):
            if 0 <= yi < h and 0 <= xi < w:
                total += wy * wx * float(img[yi, xi])
    return total


def deform_conv_oracle(x, offsets, masks, weight, bias=None, groups: int = 1, deformable_groups: int = 1) -> torch.Tensor:
    """Reference deformable convolution with explicit per-pixel, per-tap loops.

    Slow by design; meant for inputs up to about 8x8. Computes in float64 and
    returns a float64 tensor.
    """
    _check_deform_args(x, offsets, masks, weight, groups, deformable_groups)
    xn = x.detach().double().cpu().numpy()
    on = offsets.detach().double().cpu().numpy()
    mn = masks.detach().double().cpu().numpy()
    wn = weight.detach().double().cpu().numpy()
    bn = None if bias is None else bias.detach().double().cpu().numpy()
    b, cin, h, w = xn.shape
    cout, cin_g, k, _ = wn.shape
    kk = k * k
    cout_g = cout // groups
    ch_per_dg = cin // deformable_groups
    out = np.zeros((b, cout, h, w))
    for n in range(b):
        for o in range(cout):
            grp = o // cout_g
            for i in range(h):
                for j in range(w):
                    acc = 0.0 if bn is None else float(bn[o])
                    for ci in range(cin_g):
                        c = grp * cin_g + ci
                        dg = c // ch_per_dg
                        for ky in range(k):
                            for kx in range(k):
                                tap = dg * kk + ky * k + kx
                                dx = on[n, 2 * tap, i, j]
                                dy = on[n, 2 * tap + 1, i, j]
                                py = i + ky - k // 2 + dy
                                px = j + kx - k // 2 + dx
                                val = _bilinear_scalar(xn[n, c], py, px)
                                acc += wn[o, ci, ky, kx] * mn[n, tap, i, j] * val
                    out[n, o, i, j] = acc
    return torch.from_numpy(out)


class DeformConv2d(nn.Module):
    """Learnable kernel for :func:`deform_conv`; offsets and masks come from the caller."""

    def __init__(self, in_channels, out_channels, kernel_size=3, groups=1, deformable_groups=1):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if in_channels % groups or out_channels % groups or in_channels % deformable_groups:
            raise ShapeMismatch("channel counts must be divisible by groups and deformable_groups")
        self.kernel_size = kernel_size
        self.groups = groups
        self.deformable_groups = deformable_groups
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels // groups, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    @property
    def taps(self) -> int:
        return self.kernel_size**2 * self.deformable_groups

    def forward(self, x: torch.Tensor, params: AlignmentParams) -> torch.Tensor:
        return deform_conv(x, params.offsets, params.masks, self.weight, self.bias, self.groups, self.deformable_groups)


def _offset_head(in_channels: int, channels: int, out_channels: int, depth: int) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(in_channels, channels, 3, 1, 1), nn.LeakyReLU(0.1)]
    for _ in range(depth - 2):
        layers += [nn.Conv2d(channels, channels, 3, 1, 1), nn.LeakyReLU(0.1)]
    layers.append(nn.Conv2d(channels, out_channels, 3, 1, 1))
    return nn.Sequential(*layers)


class FlowGuidedAlign(nn.Module):
    """Deformable alignment whose offsets are optical flow plus a learned residual.

    The residual offsets and the mask logits are predicted from
    ``cat(warp(neighbor, flow), current, flow)``.
    """

    def __init__(self, channels: int, kernel_size: int = 3, deformable_groups: int | None = None):
        super().__init__()
        g = default_deformable_groups(channels) if deformable_groups is None else deformable_groups
        self.dcn = DeformConv2d(channels, channels, kernel_size, deformable_groups=g)
        self.offset_net = _offset_head(2 * channels + 2, channels, 3 * self.dcn.taps, depth=3)

    @property
    def head(self) -> nn.Conv2d:
        return self.offset_net[-1]

    def forward(self, neighbor, current, flow) -> tuple[torch.Tensor, AlignmentParams]:
        if neighbor.shape != current.shape or flow.shape[-2:] != current.shape[-2:]:
            raise ShapeMismatch(
                f"neighbor {tuple(neighbor.shape)}, current {tuple(current.shape)} and flow {tuple(flow.shape)} disagree"
            )
        taps = self.dcn.taps
        pred = self.offset_net(torch.cat([warp(neighbor, flow), current, flow], dim=1))
        offsets = pred[:, : 2 * taps] + flow.repeat(1, taps, 1, 1)
        masks = torch.sigmoid(pred[:, 2 * taps :])
        params = AlignmentParams(offsets, masks)
        return self.dcn(neighbor, params), params


class ReAlign(nn.Module):
    """Re-alignment that reuses offsets and masks from an earlier alignment.

    The neighbor is first pre-aligned with the given parameters; the
    pre-aligned and current features then predict residual offsets and
    residual mask values (no activation), which are added to the given ones.
    The summed mask is clamped to [0, 1]. Both deformable convolutions share
    one kernel.
    """

    def __init__(self, channels: int, kernel_size: int = 3, deformable_groups: int | None = None):
        super().__init__()
        g = default_deformable_groups(channels) if deformable_groups is None else deformable_groups
        self.dcn = DeformConv2d(channels, channels, kernel_size, deformable_groups=g)
        self.residual_net = _offset_head(2 * channels, channels, 3 * self.dcn.taps, depth=4)

    @property
    def head(self) -> nn.Conv2d:
        return self.residual_net[-1]

    def pre_align(self, nbr: torch.Tensor, params: AlignmentParams) -> torch.Tensor:
        return self.dcn(nbr, params)

    def forward(self, cur, nbr, params: AlignmentParams) -> tuple[torch.Tensor, AlignmentParams]:
        if cur.shape != nbr.shape or params.masks.shape[-2:] != cur.shape[-2:]:
            raise ShapeMismatch("current, neighbor and alignment parameters must share spatial dims")
        taps = self.dcn.taps
        pre = self.pre_align(nbr, params)
        residual = self.residual_net(torch.cat([pre, cur], dim=1))
        summed = AlignmentParams(
            params.offsets + residual[:, : 2 * taps],
            torch.clamp(params.masks + residual[:, 2 * taps :], 0.0, 1.0),
        )
        return self.dcn(nbr, summed), summed
