"""Training loop, evaluation and the component ablation driver."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, save_checkpoint
from .data import ClipPair, sample_patch
from .errors import EmptyDataset, InvalidArgument, InvalidDataset, NumericalDivergence
from .losses import LossConfig, charbonnier, total_loss
from .metrics import MetricReport
from .model import MSVSR, VARIANTS, ModelConfig, build_model, count_parameters, upsample_bilinear, variant_config

log = logging.getLogger(__name__)

GRAD_CLIP_NORM = 10.0
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 2000
    lr_main_init: float = 2e-4
    lr_flow_init: float = 2e-5
    lr_final: float = 2e-7
    flow_freeze_iters: int = 100
    batch_size: int = 2
    patch_size: int = 32
    n_frames: int = 5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        if self.total_iters < 0 or not 0 <= self.flow_freeze_iters <= max(self.total_iters, 0):
            raise InvalidArgument("need 0 <= flow_freeze_iters <= total_iters")
        if min(self.lr_main_init, self.lr_flow_init, self.lr_final) <= 0:
            raise InvalidArgument("learning rates must be positive")
        if self.lr_final > self.lr_main_init:
            raise InvalidArgument("lr_final must not exceed lr_main_init")
        if min(self.batch_size, self.patch_size, self.n_frames) < 1:
            raise InvalidArgument("batch_size, patch_size and n_frames must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


TRAIN_PRESETS = {
    "full-scale": TrainConfig(
        total_iters=300_000,
        flow_freeze_iters=2_500,
        batch_size=16,
        patch_size=64,
        n_frames=30,
    ),
    "desk": TrainConfig(),
}


def lr_at(it: int, cfg: TrainConfig, which: str = "main") -> float:
    """Cosine-annealed learning rate of parameter group ``which`` at iteration ``it``.

    The flow group returns 0 while ``it < flow_freeze_iters``.
    """
    if which not in ("main", "flow"):
        raise InvalidArgument(f"unknown parameter group {which!r}")
    if not 0 <= it <= cfg.total_iters:
        raise InvalidArgument(f"iteration {it} outside [0, {cfg.total_iters}]")
    if which == "flow" and it < cfg.flow_freeze_iters:
        return 0.0
    init = cfg.lr_main_init if which == "main" else cfg.lr_flow_init
    w = 1.0 if cfg.total_iters == 0 else (1.0 + math.cos(math.pi * it / cfg.total_iters)) / 2.0
    # convex-combination form keeps both endpoints exact in floating point
    return init * w + cfg.lr_final * (1.0 - w)


def make_batch(dataset: Sequence[ClipPair], cfg: TrainConfig, it: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Deterministic batch for iteration ``it``; depends only on (seed, it, slot)."""
    lrs, hrs = [], []
    for slot in range(cfg.batch_size):
        rng = np.random.default_rng([cfg.seed, it, slot])
        clip = dataset[int(rng.integers(len(dataset)))]
        sample = sample_patch(clip.hr, clip.lr, cfg.patch_size, cfg.n_frames, int(rng.integers(2**62)))
        lrs.append(sample.lr.frames)
        hrs.append(sample.hr.frames)
    return torch.from_numpy(np.stack(lrs)), torch.from_numpy(np.stack(hrs))


def make_optimizer(model: MSVSR, cfg: TrainConfig) -> torch.optim.Adam:
    flow = list(model.flownet.parameters())
    flow_ids = {id(p) for p in flow}
    main = [p for p in model.parameters() if id(p) not in flow_ids]
    return torch.optim.Adam(
        [{"params": main, "lr": cfg.lr_main_init}, {"params": flow, "lr": 0.0}],
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=ADAM_EPS,
        weight_decay=0.0,
    )


def effective_loss(model_cfg: ModelConfig, cfg: TrainConfig) -> LossConfig:
    return dataclasses.replace(cfg.loss, aux_enabled=cfg.loss.aux_enabled and model_cfg.use_aux_loss)


def model_from_checkpoint(ckpt: Checkpoint) -> MSVSR:
    model = MSVSR(ModelConfig.from_dict(ckpt.model_config))
    model.load_state_dict(ckpt.model_state)
    return model.eval()


def make_checkpoint(it: int, model, opt, model_cfg: ModelConfig, cfg: TrainConfig) -> Checkpoint:
    return Checkpoint(
        iteration=it,
        model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
        optimizer_state=_clone_state(opt.state_dict()),
        train_config=cfg.to_dict(),
        model_config=model_cfg.to_dict(),
        rng_state={"seed": cfg.seed, "torch": torch.get_rng_state()},
    )


def _clone_state(state):
    if torch.is_tensor(state):
        return state.detach().clone()
    if isinstance(state, dict):
        return {k: _clone_state(v) for k, v in state.items()}
    if isinstance(state, list):
        return [_clone_state(v) for v in state]
    return state


@dataclass
class TrainResult:
    model: MSVSR
    checkpoint: Checkpoint
    history: list[dict]


def train(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    dataset: Sequence[ClipPair],
    *,
    resume: Optional[Checkpoint] = None,
    stop_at: Optional[int] = None,
    checkpoint_path=None,
    checkpoint_every: int = 0,
    callback: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Optimize an :class:`MSVSR` model on ``dataset``.

    Args:
        model_cfg: architecture to build (ignored for weights when resuming).
        cfg: optimization settings; ``cfg.total_iters`` defines the schedule.
        dataset: clips with HR frames.
        resume: continue from this checkpoint's iteration, weights and
            optimizer state.
        stop_at: stop after this many completed iterations (defaults to
            ``cfg.total_iters``); the schedule is unaffected.
        checkpoint_path: if given, the checkpoint is written here every
            ``checkpoint_every`` steps and at the end.
        callback: called with each history row.

    Raises:
        NumericalDivergence: on a non-finite loss. The checkpoint file, if
            any, keeps its last good state.
    """
    if not dataset:
        raise EmptyDataset("training needs at least one clip")
    if any(c.hr is None for c in dataset):
        raise InvalidDataset("every training clip needs HR frames")
    torch.manual_seed(cfg.seed)
    model = build_model(model_cfg, cfg.seed)
    opt = make_optimizer(model, cfg)
    start = 0
    if resume is not None:
        model.load_state_dict(resume.model_state)
        opt.load_state_dict(_clone_state(resume.optimizer_state))
        if "torch" in resume.rng_state:
            torch.set_rng_state(resume.rng_state["torch"])
        start = resume.iteration
    stop = cfg.total_iters if stop_at is None else min(stop_at, cfg.total_iters)
    loss_cfg = effective_loss(model_cfg, cfg)

    model.train()
    history = []
    for it in range(start, stop):
        lr_main, lr_flow = lr_at(it, cfg, "main"), lr_at(it, cfg, "flow")
        opt.param_groups[0]["lr"] = lr_main
        opt.param_groups[1]["lr"] = lr_flow
        lr_batch, hr_batch = make_batch(dataset, cfg, it)
        opt.zero_grad(set_to_none=True)
        loss, parts = total_loss(model(lr_batch), hr_batch, loss_cfg)
        if not math.isfinite(parts["total"]):
            raise NumericalDivergence(f"non-finite loss at iteration {it}")
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), GRAD_CLIP_NORM)
        opt.step()
        row = {
            "iter": it,
            "lr_main": lr_main,
            "lr_flow": lr_flow,
            "loss_main": parts["main"],
            "loss_aux": parts["aux"],
            "loss_total": parts["total"],
        }
        history.append(row)
        if callback is not None:
            callback(row)
        if checkpoint_path and checkpoint_every and (it + 1) % checkpoint_every == 0:
            save_checkpoint(make_checkpoint(it + 1, model, opt, model_cfg, cfg), checkpoint_path)

    ckpt = make_checkpoint(max(stop, start), model, opt, model_cfg, cfg)
    if checkpoint_path:
        save_checkpoint(ckpt, checkpoint_path)
    model.eval()
    return TrainResult(model=model, checkpoint=ckpt, history=history)


HISTORY_COLUMNS = ["iter", "lr_main", "lr_flow", "loss_main", "loss_aux", "loss_total"]


def write_history(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in HISTORY_COLUMNS})


# -- evaluation ----------------------------------------------------------------


def bicubic_upsample(lr: torch.Tensor) -> torch.Tensor:
    return F.interpolate(lr, scale_factor=4, mode="bicubic", align_corners=False)


@torch.no_grad()
def super_resolve(model: MSVSR, lr_frames: np.ndarray) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Run the model on one clip (N, 3, H, W); returns clamped SR and auxiliary frames."""
    out = model(torch.from_numpy(np.asarray(lr_frames, dtype=np.float32))[None])
    sr = out.sr[0].clamp(0, 1).numpy()
    aux = None if out.aux is None else out.aux[0].clamp(0, 1).numpy()
    return sr, aux


@torch.no_grad()
def evaluate(model, dataset: Sequence[ClipPair], channel_mode: str = "y", crop_border: int = 0) -> MetricReport:
    """PSNR/SSIM of the model and of bicubic and bilinear x4 baselines, per clip."""
    if isinstance(model, Checkpoint):
        model = model_from_checkpoint(model)
    model.eval()
    report = MetricReport(channel_mode=channel_mode, crop_border=crop_border)
    for clip in dataset:
        if clip.hr is None:
            raise InvalidDataset(f"clip {clip.clip_id!r} has no HR reference")
        sr, _ = super_resolve(model, clip.lr.frames)
        lr = torch.from_numpy(clip.lr.frames)
        gt = clip.hr.frames
        report.add_clip("model", clip.clip_id, sr, gt)
        report.add_clip("bicubic", clip.clip_id, bicubic_upsample(lr).clamp(0, 1).numpy(), gt)
        report.add_clip("bilinear", clip.clip_id, upsample_bilinear(lr).clamp(0, 1).numpy(), gt)
    return report


@torch.no_grad()
def dataset_loss(model: MSVSR, dataset: Sequence[ClipPair], eps: float = 1e-12) -> float:
    """Mean main Charbonnier loss over whole clips."""
    model.eval()
    losses = []
    for clip in dataset:
        out = model(torch.from_numpy(clip.lr.frames)[None])
        losses.append(charbonnier(out.sr[0], torch.from_numpy(clip.hr.frames), eps).item())
    return float(np.mean(losses))


# -- ablation ------------------------------------------------------------------


@dataclass
class AblationRow:
    variant: str
    ram: bool
    lfm: bool
    aux_loss: bool
    params: int
    psnr_db: float
    ssim: float
    loss_initial: float
    loss_final: float


def ablate(
    base_cfg: ModelConfig,
    cfg: TrainConfig,
    dataset: Sequence[ClipPair],
    variants: Sequence[str] = tuple(VARIANTS),
    channel_mode: str = "rgb",
) -> list[AblationRow]:
    """Train each flag variant with identical seed and data and tabulate the results."""
    rows = []
    for name in variants:
        vcfg = variant_config(base_cfg, name)
        initial = dataset_loss(build_model(vcfg, cfg.seed), dataset, cfg.loss.charbonnier_eps)
        result = train(vcfg, cfg, dataset)
        final = dataset_loss(result.model, dataset, cfg.loss.charbonnier_eps)
        mean = evaluate(result.model, dataset, channel_mode).mean("model")
        rows.append(
            AblationRow(
                variant=name,
                ram=vcfg.use_ram,
                lfm=vcfg.use_lfm,
                aux_loss=vcfg.use_aux_loss,
                params=count_parameters(result.model),
                psnr_db=mean["psnr_db"],
                ssim=mean["ssim"],
                loss_initial=initial,
                loss_final=final,
            )
        )
        log.info("variant %s: params=%d psnr=%.3f", name, rows[-1].params, rows[-1].psnr_db)
    return rows


def ablation_markdown(rows: Sequence[AblationRow]) -> str:
    mark = lambda f: "x" if f else ""  # noqa: E731
    lines = [
        "| Variant | RAM | LFM | Aux-Loss | Params | PSNR | SSIM |",
        "|---|---|---|---|---|---|---|",
    ]
    for r in rows:
        lines.append(
            f"| {r.variant} | {mark(r.ram)} | {mark(r.lfm)} | {mark(r.aux_loss)} | {r.params} | {r.psnr_db:.4f} | {r.ssim:.4f} |"
        )
    return "\n".join(lines) + "\n"


def ablation_tsv(rows: Sequence[AblationRow]) -> str:
    header = ["variant", "RAM", "LFM", "Aux-Loss", "PSNR", "SSIM", "params", "loss_initial", "loss_final"]
    lines = ["\t".join(header)]
    for r in rows:
        lines.append(
            "\t".join(
                [
                    r.variant,
                    str(int(r.ram)),
                    str(int(r.lfm)),
                    str(int(r.aux_loss)),
                    f"{r.psnr_db:.4f}",
                    f"{r.ssim:.6f}",
                    str(r.params),
                    repr(r.loss_initial),
                    repr(r.loss_final),
                ]
            )
        )
    return "\n".join(lines) + "\n"
