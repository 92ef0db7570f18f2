"""The three-stage video super-resolution network and its named configurations.

Stage 1 extracts per-frame features and fuses each frame with its aligned
neighbours (local fusion). Stage 2 propagates features bidirectionally with
flow-guided deformable alignment and optionally feeds an auxiliary x4 head.
Stage 3 re-aligns neighbouring stage-2 features using the stage-2 offsets and
masks, fuses them, and reconstructs the x4 output on top of a bilinear
upsampling of the input.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .deform import AlignmentParams, DeformConv2d, FlowGuidedAlign, ReAlign
from .errors import ConfigError, EmptyDataset, InvalidState, ShapeMismatch
from .flow import FlowLevel, FlowNet, FlowPyramidConfig

SCALE = 4


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 16
    n_extract_blocks: int = 1
    n_fusion_blocks: int = 1
    n_propagation_branches: int = 4
    n_blocks_per_branch: int = 1
    n_recon_blocks: int = 1
    scale: int = SCALE
    use_lfm: bool = True
    use_ram: bool = True
    use_aux_loss: bool = True
    flow: FlowPyramidConfig = field(default_factory=lambda: FlowPyramidConfig(n_levels=3, base_channels=8))
    kernel_size: int = 3
    deformable_groups: Optional[int] = None

    def __post_init__(self):
        if self.scale != SCALE:
            raise ConfigError(f"only x{SCALE} upsampling is supported")
        counts = (
            self.channels,
            self.n_extract_blocks,
            self.n_fusion_blocks,
            self.n_propagation_branches,
            self.n_blocks_per_branch,
            self.n_recon_blocks,
        )
        if min(counts) < 1:
            raise ConfigError("channel and block counts must all be >= 1")
        if isinstance(self.flow, dict):
            object.__setattr__(self, "flow", FlowPyramidConfig(**self.flow))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["flow"] = FlowPyramidConfig(**d["flow"])
        return cls(**d)


MODEL_CONFIGS = {
    "tiny": ModelConfig(),
    "pp-msvsr": ModelConfig(
        channels=32,
        n_extract_blocks=4,
        n_fusion_blocks=2,
        n_propagation_branches=4,
        n_blocks_per_branch=2,
        n_recon_blocks=4,
        flow=FlowPyramidConfig(n_levels=5, base_channels=8),
    ),
    "pp-msvsr-l": ModelConfig(
        channels=64,
        n_extract_blocks=7,
        n_fusion_blocks=4,
        n_propagation_branches=4,
        n_blocks_per_branch=9,
        n_recon_blocks=7,
        flow=FlowPyramidConfig(n_levels=5, base_channels=32),
    ),
}

# Ablation variants: flag sets (use_ram, use_lfm, use_aux_loss)
VARIANTS = {
    "A": dict(use_ram=False, use_lfm=False, use_aux_loss=False),
    "B": dict(use_ram=True, use_lfm=False, use_aux_loss=False),
    "C": dict(use_ram=True, use_lfm=True, use_aux_loss=False),
    "full": dict(use_ram=True, use_lfm=True, use_aux_loss=True),
}


def get_config(name: str, **overrides) -> ModelConfig:
    try:
        cfg = MODEL_CONFIGS[name]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; choose from {sorted(MODEL_CONFIGS)}") from None
    return dataclasses.replace(cfg, **overrides)


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}; choose from {list(VARIANTS)}")
    return dataclasses.replace(base, **VARIANTS[variant])


class ResidualBlock(nn.Module):
    """``x + conv(lrelu(conv(x)))`` without normalization."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)

    def forward(self, x):
        return x + self.conv2(F.leaky_relu(self.conv1(x), 0.1))


class ConvBlocks(nn.Module):
    """A 3x3 conv changing the width to ``out_channels``, then residual blocks."""

    def __init__(self, in_channels: int, out_channels: int, n_blocks: int):
        super().__init__()
        self.conv_in = nn.Conv2d(in_channels, out_channels, 3, 1, 1)
        self.blocks = nn.Sequential(*(ResidualBlock(out_channels) for _ in range(n_blocks)))

    def forward(self, x):
        return self.blocks(F.leaky_relu(self.conv_in(x), 0.1))


class LocalFusion(nn.Module):
    """Fuse a frame's features with flow-guided aligned features of both neighbours."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.channels
        self.align_prev = FlowGuidedAlign(c, cfg.kernel_size, cfg.deformable_groups)
        self.align_next = FlowGuidedAlign(c, cfg.kernel_size, cfg.deformable_groups)
        self.fuse = ConvBlocks(3 * c, c, cfg.n_fusion_blocks)

    def forward(self, g_prev, g_cur, g_next, flow_prev, flow_next):
        """All arguments are batched over frames; flows map ``g_cur`` coordinates to the neighbour."""
        a_prev, _ = self.align_prev(g_prev, g_cur, flow_prev)
        a_next, _ = self.align_next(g_next, g_cur, flow_next)
        return self.fuse(torch.cat([a_prev, g_cur, a_next], dim=1))


class PropagationBranch(nn.Module):
    def __init__(self, cfg: ModelConfig, index: int):
        super().__init__()
        c = cfg.channels
        self.backward = index % 2 == 0
        self.align = FlowGuidedAlign(c, cfg.kernel_size, cfg.deformable_groups)
        self.backbone = ConvBlocks((2 + index) * c, c, cfg.n_blocks_per_branch)


class AuxHead(nn.Module):
    """x4 sub-pixel head on stage-2 features: conv, pixel shuffle x4, 3-channel projection."""

    def __init__(self, channels: int):
        super().__init__()
        self.mid = max(4, channels // 4)
        self.conv_up = nn.Conv2d(channels, self.mid * SCALE * SCALE, 3, 1, 1)
        self.conv_out = nn.Conv2d(self.mid, 3, 3, 1, 1)

    def forward(self, f):
        return self.conv_out(F.pixel_shuffle(self.conv_up(f), SCALE))


class Reconstruction(nn.Module):
    def __init__(self, channels: int, n_blocks: int):
        super().__init__()
        c = channels
        self.blocks = nn.Sequential(*(ResidualBlock(c) for _ in range(n_blocks)))
        self.upconv1 = nn.Conv2d(c, 4 * c, 3, 1, 1)
        self.upconv2 = nn.Conv2d(c, 4 * c, 3, 1, 1)
        self.conv_hr = nn.Conv2d(c, c, 3, 1, 1)
        self.conv_last = nn.Conv2d(c, 3, 3, 1, 1)

    def forward(self, feat, lr):
        x = self.blocks(feat)
        x = F.leaky_relu(F.pixel_shuffle(self.upconv1(x), 2), 0.1)
        x = F.leaky_relu(F.pixel_shuffle(self.upconv2(x), 2), 0.1)
        x = self.conv_last(F.leaky_relu(self.conv_hr(x), 0.1))
        return x + upsample_bilinear(lr)


def upsample_bilinear(x: torch.Tensor, scale: int = SCALE) -> torch.Tensor:
    return F.interpolate(x, scale_factor=scale, mode="bilinear", align_corners=False)


@dataclass
class ForwardOutput:
    sr: torch.Tensor  # (B, N, 3, 4H, 4W)
    aux: Optional[torch.Tensor]  # same shape as sr, or None
    stage2_params: dict  # "from_next"/"from_prev": per-frame AlignmentParams or None
    features: dict = field(default_factory=dict)


class MSVSR(nn.Module):
    """Multi-stage recurrent video super-resolution network."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.flownet = FlowNet(cfg.flow)
        self.feat_extract = ConvBlocks(3, c, cfg.n_extract_blocks)
        if cfg.use_lfm:
            self.lfm = LocalFusion(cfg)
        self.branches = nn.ModuleList(PropagationBranch(cfg, i) for i in range(cfg.n_propagation_branches))
        if cfg.use_ram:
            self.stage3_align = ReAlign(c, cfg.kernel_size, cfg.deformable_groups)
        else:
            self.stage3_align = FlowGuidedAlign(c, cfg.kernel_size, cfg.deformable_groups)
        self.stage3_fuse = ConvBlocks(3 * c, c, cfg.n_fusion_blocks)
        self.recon = Reconstruction(c, cfg.n_recon_blocks)
        if cfg.use_aux_loss:
            self.aux_head = AuxHead(c)

    # -- flows ---------------------------------------------------------------

    def compute_flows(self, lr: torch.Tensor):
        """Return (flows_to_next, flows_to_prev), each (B, N-1, 2, H, W).

        ``flows_to_next[:, i]`` maps frame i to frame i+1 and
        ``flows_to_prev[:, i]`` maps frame i+1 to frame i.
        """
        b, n, c, h, w = lr.shape
        a = lr[:, :-1].reshape(-1, c, h, w)
        z = lr[:, 1:].reshape(-1, c, h, w)
        flows = self.flownet(torch.cat([a, z]), torch.cat([z, a]))
        to_next, to_prev = flows.split(a.shape[0])
        return to_next.view(b, n - 1, 2, h, w), to_prev.view(b, n - 1, 2, h, w)

    # -- stages --------------------------------------------------------------

    def extract_features(self, lr: torch.Tensor) -> torch.Tensor:
        b, n, c, h, w = lr.shape
        if n < 1:
            raise EmptyDataset("cannot extract features from an empty clip")
        return self.feat_extract(lr.reshape(b * n, c, h, w)).view(b, n, -1, h, w)

    def local_fusion(self, g: torch.Tensor, to_next, to_prev) -> torch.Tensor:
        """Fuse every frame with its neighbours; boundary frames reuse their only neighbour."""
        b, n, c, h, w = g.shape
        if n == 1:
            zero = g.new_zeros(b, 1, 2, h, w)
            prev_idx, next_idx = [0], [0]
            flow_prev = flow_next = zero
        else:
            prev_idx = [1] + list(range(n - 1))
            next_idx = list(range(1, n)) + [n - 2]
            # frame 0 borrows its next neighbour, frame n-1 its previous one
            flow_prev = torch.cat([to_next[:, :1], to_prev], dim=1)
            flow_next = torch.cat([to_next, to_prev[:, -1:]], dim=1)
        flat = lambda t: t.reshape(b * n, *t.shape[2:])  # noqa: E731
        out = self.lfm(
            flat(g[:, prev_idx]), flat(g), flat(g[:, next_idx]), flat(flow_prev), flat(flow_next)
        )
        return out.view(b, n, c, h, w)

    def propagate(self, fused: torch.Tensor, to_next, to_prev):
        """Grid of alternating backward/forward propagation branches.

        Returns the final branch's features (B, N, C, H, W) and a dict with the
        alignment parameters of the last backward branch (``from_next``,
        aligning frame i+1 onto i) and the last forward branch
        (``from_prev``, aligning frame i-1 onto i).
        """
        b, n, c, h, w = fused.shape
        outs: list[list[torch.Tensor]] = []
        params = {"from_next": [None] * n, "from_prev": [None] * n}
        for branch in self.branches:
            order = range(n - 1, -1, -1) if branch.backward else range(n)
            key = "from_next" if branch.backward else "from_prev"
            feats: list[Optional[torch.Tensor]] = [None] * n
            branch_params: list[Optional[AlignmentParams]] = [None] * n
            prop = fused.new_zeros(b, c, h, w)
            for step, i in enumerate(order):
                if step > 0:
                    flow = to_next[:, i] if branch.backward else to_prev[:, i - 1]
                    prop, branch_params[i] = branch.align(prop, fused[:, i], flow)
                inputs = [fused[:, i]] + [o[i] for o in outs] + [prop]
                prop = prop + branch.backbone(torch.cat(inputs, dim=1))
                feats[i] = prop
            outs.append(feats)
            params[key] = branch_params
        return torch.stack(outs[-1], dim=1), params

    def stage3(self, f2: torch.Tensor, params2: dict, to_next, to_prev) -> torch.Tensor:
        """Align both temporal neighbours of every stage-2 feature and fuse them."""
        b, n, c, h, w = f2.shape
        if n == 1:
            a_next = a_prev = f2
        else:
            a_next = self._align_pairs(f2[:, :-1], f2[:, 1:], params2["from_next"][:-1], to_next)
            a_prev = self._align_pairs(f2[:, 1:], f2[:, :-1], params2["from_prev"][1:], to_prev)
            if a_next is None:
                a_next = a_prev
            if a_prev is None:
                a_prev = a_next
            # boundary frames duplicate the aligned neighbour that exists
            a_next, a_prev = (
                torch.cat([a_next, a_prev[:, -1:]], dim=1),
                torch.cat([a_next[:, :1], a_prev], dim=1),
            )
        flat = lambda t: t.reshape(b * n, c, h, w)  # noqa: E731
        fused = self.stage3_fuse(torch.cat([flat(f2), flat(a_next), flat(a_prev)], dim=1))
        return f2 + fused.view(b, n, c, h, w)

    def _align_pairs(self, cur, nbr, params, flows):
        b, m, c, h, w = cur.shape
        cur = cur.reshape(b * m, c, h, w)
        nbr = nbr.reshape(b * m, c, h, w)
        if self.cfg.use_ram:
            if any(p is None for p in params):
                return None
            p = AlignmentParams(
                torch.stack([q.offsets for q in params], 1).flatten(0, 1),
                torch.stack([q.masks for q in params], 1).flatten(0, 1),
            )
            aligned, _ = self.stage3_align(cur, nbr, p)
        else:
            aligned, _ = self.stage3_align(nbr, cur, flows.reshape(b * m, 2, h, w))
        return aligned.view(b, m, c, h, w)

    def aux_upsample(self, f2: torch.Tensor) -> torch.Tensor:
        if not self.cfg.use_aux_loss:
            raise InvalidState("auxiliary head is disabled in this configuration")
        b, n, c, h, w = f2.shape
        return self.aux_head(f2.reshape(b * n, c, h, w)).view(b, n, 3, SCALE * h, SCALE * w)

    def reconstruct(self, feats: torch.Tensor, lr: torch.Tensor) -> torch.Tensor:
        b, n, c, h, w = feats.shape
        if lr.shape[-2:] != (h, w):
            raise ShapeMismatch("features and LR frames differ in size")
        out = self.recon(feats.reshape(b * n, c, h, w), lr.reshape(b * n, 3, h, w))
        return out.view(b, n, 3, SCALE * h, SCALE * w)

    def forward(self, lr: torch.Tensor, keep_features: bool = False) -> ForwardOutput:
        """Run all stages on ``lr`` of shape (B, N, 3, H, W)."""
        if lr.dim() != 5 or lr.shape[2] != 3:
            raise ShapeMismatch(f"expected (B, N, 3, H, W) input, got {tuple(lr.shape)}")
        b, n, _, h, w = lr.shape
        if n < 1:
            raise EmptyDataset("empty clip")
        if n > 1:
            to_next, to_prev = self.compute_flows(lr)
        else:
            to_next = to_prev = lr.new_zeros(b, 0, 2, h, w)

        g = self.extract_features(lr)
        fused = self.local_fusion(g, to_next, to_prev) if self.cfg.use_lfm else g
        f2, params2 = self.propagate(fused, to_next, to_prev)
        aux = self.aux_upsample(f2) if self.cfg.use_aux_loss else None
        f3 = self.stage3(f2, params2, to_next, to_prev)
        sr = self.reconstruct(f3, lr)
        feats = dict(g=g, fused=fused, f2=f2, f3=f3) if keep_features else {}
        return ForwardOutput(sr=sr, aux=aux, stage2_params=params2, features=feats)


# -- initialization and statistics --------------------------------------------


def _stable_seed(seed: int, name: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}/{name}".encode()).digest()[:8], "little") >> 1


def _head_convs(model: nn.Module) -> set[int]:
    heads = set()
    for m in model.modules():
        if isinstance(m, (FlowLevel, FlowGuidedAlign, ReAlign)):
            heads.add(id(m.head))
        if isinstance(m, ResidualBlock):
            heads.add(id(m.conv2))
        if isinstance(m, Reconstruction):
            heads.add(id(m.conv_last))
        if isinstance(m, AuxHead):
            heads.add(id(m.conv_out))
    return heads


@torch.no_grad()
def init_weights(model: nn.Module, seed: int) -> nn.Module:
    """Kaiming-normal init, seeded per conv from a generator keyed by module name.

    Toggling an optional stage therefore leaves the initial weights of all
    other modules unchanged. Residual-branch outputs, offset/flow heads and
    the RGB projections are scaled by 0.1 so training starts near the
    bilinear baseline. The auxiliary projection bias starts at 0.5.
    """
    heads = _head_convs(model)
    gain = math.sqrt(2.0 / (1.0 + 0.1**2))
    for name, m in model.named_modules():
        if isinstance(m, (nn.Conv2d, DeformConv2d)):
            gen = torch.Generator().manual_seed(_stable_seed(seed, name))
            std = gain / math.sqrt(m.weight[0].numel())
            if id(m) in heads:
                std *= 0.1
            m.weight.normal_(0.0, std, generator=gen)
            if m.bias is not None:
                m.bias.zero_()
    for m in model.modules():
        if isinstance(m, AuxHead):
            # the auxiliary head has no bilinear residual; start it at mid-gray
            m.conv_out.bias.fill_(0.5)
    return model


def build_model(cfg: ModelConfig, seed: int = 0) -> MSVSR:
    return init_weights(MSVSR(cfg), seed)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def model_stats(cfg: ModelConfig | str) -> dict:
    """Exact learnable-parameter count, total and per top-level module."""
    if isinstance(cfg, str):
        cfg = get_config(cfg)
    with torch.device("meta"):
        model = MSVSR(cfg)
    per_module = {name: count_parameters(child) for name, child in model.named_children()}
    return {"param_count": count_parameters(model), "per_module": per_module}
