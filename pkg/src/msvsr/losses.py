"""Charbonnier reconstruction loss, auxiliary stage-2 loss and their combination."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidState, ShapeMismatch


@dataclass(frozen=True)
class LossConfig:
    charbonnier_eps: float = 1e-12
    aux_weight: float = 1.0
    aux_enabled: bool = True

    def __post_init__(self):
        if self.charbonnier_eps <= 0:
            raise ValueError("charbonnier_eps must be positive")
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be non-negative")


def charbonnier(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Mean of ``sqrt((pred - gt)**2 + eps)`` over all elements."""
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ")
    if eps <= 0:
        raise ValueError("eps must be positive")
    diff = pred - gt
    return torch.sqrt(diff * diff + eps).mean()


def aux_loss(aux: torch.Tensor, gt: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Average over frames of the per-frame Charbonnier loss.

    ``aux`` and ``gt`` are (B, N, 3, H, W); each frame's loss is the
    elementwise Charbonnier mean over its batch entries and pixels.
    """
    if aux.shape != gt.shape:
        raise ShapeMismatch(f"auxiliary output {tuple(aux.shape)} and target {tuple(gt.shape)} differ")
    n = aux.shape[1]
    per_frame = [charbonnier(aux[:, i], gt[:, i], eps) for i in range(n)]
    return torch.stack(per_frame).mean()


def total_loss(output, gt: torch.Tensor, cfg: LossConfig = LossConfig()) -> tuple[torch.Tensor, dict]:
    """Main Charbonnier loss plus ``aux_weight`` times the auxiliary loss.

    Returns the total and a dict with float values for ``main``, ``aux`` and
    ``total`` (``aux`` is 0.0 when disabled).
    """
    main = charbonnier(output.sr, gt, cfg.charbonnier_eps)
    total = main
    aux_value = torch.zeros((), dtype=main.dtype)
    if cfg.aux_enabled:
        if output.aux is None:
            raise InvalidState("auxiliary loss requested but the model produced no auxiliary output")
        aux_value = aux_loss(output.aux, gt, cfg.charbonnier_eps)
        total = main + cfg.aux_weight * aux_value
    parts = {"main": main.item(), "aux": aux_value.item(), "total": total.item()}
    return total, parts
