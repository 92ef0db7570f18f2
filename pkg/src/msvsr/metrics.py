"""PSNR / SSIM on 8-bit quantized frames, RGB or BT.601 luma."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch

log = logging.getLogger(__name__)

Y_COEFFS = (65.481, 128.553, 24.966)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
PEAK = 255.0


def normalize_mode(mode: str) -> str:
    m = str(mode).upper()
    if m not in ("Y", "RGB"):
        raise ValueError(f"channel mode must be 'y' or 'rgb', got {mode!r}")
    return m


def rgb_to_y(frame: np.ndarray) -> np.ndarray:
    """BT.601 luma of a (3, H, W) frame in [0, 1]; returns (1, H, W) in [16/255, 235/255]."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise ShapeMismatch(f"expected a (3, H, W) frame, got {frame.shape}")
    r, g, b = frame
    return ((Y_COEFFS[0] * r + Y_COEFFS[1] * g + Y_COEFFS[2] * b + 16.0) / 255.0)[None]


def _prepare(a, b, channel_mode: str, crop_border: int) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"frames differ in shape: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[0] != 3:
        raise ShapeMismatch(f"expected (3, H, W) frames, got {a.shape}")
    qa = np.clip(np.round(a * 255.0), 0, 255)
    qb = np.clip(np.round(b * 255.0), 0, 255)
    if normalize_mode(channel_mode) == "Y":
        qa = rgb_to_y(qa / 255.0) * 255.0
        qb = rgb_to_y(qb / 255.0) * 255.0
    if crop_border:
        c = crop_border
        if 2 * c >= qa.shape[1] or 2 * c >= qa.shape[2]:
            raise ShapeMismatch(f"crop_border {c} leaves nothing of a {qa.shape[1]}x{qa.shape[2]} frame")
        qa = qa[:, c:-c, c:-c]
        qb = qb[:, c:-c, c:-c]
    return qa, qb


def psnr(a, b, channel_mode: str = "rgb", crop_border: int = 0) -> float:
    """PSNR in dB with peak 255; identical frames give ``math.inf``."""
    qa, qb = _prepare(a, b, channel_mode, crop_border)
    mse = np.mean((qa - qb) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(PEAK**2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = win.shape[0]
    rows = sliding_window_view(img, k, axis=0) @ win
    return sliding_window_view(rows, k, axis=1) @ win


def _ssim_channel(x: np.ndarray, y: np.ndarray, win: np.ndarray) -> float:
    c1 = (SSIM_K1 * PEAK) ** 2
    c2 = (SSIM_K2 * PEAK) ** 2
    mu_x = _filter_valid(x, win)
    mu_y = _filter_valid(y, win)
    var_x = _filter_valid(x * x, win) - mu_x * mu_x
    var_y = _filter_valid(y * y, win) - mu_y * mu_y
    cov = _filter_valid(x * y, win) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def ssim(a, b, channel_mode: str = "rgb", crop_border: int = 0) -> float:
    """Single-scale SSIM (11x11 Gaussian, sigma 1.5, valid windows), averaged over channels."""
    qa, qb = _prepare(a, b, channel_mode, crop_border)
    if min(qa.shape[1:]) < SSIM_WINDOW:
        raise ShapeMismatch(f"SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {qa.shape[1:]}")
    win = gaussian_window()
    return float(np.mean([_ssim_channel(x, y, win) for x, y in zip(qa, qb)]))


def mean_finite(values: Iterable[float], what: str = "PSNR") -> float:
    """Mean that skips infinite entries (identical frames), logging a warning when it does."""
    values = list(values)
    finite = [v for v in values if math.isfinite(v)]
    if len(finite) < len(values):
        log.warning("%d of %d %s values are infinite and excluded from the mean", len(values) - len(finite), len(values), what)
    if not finite:
        return math.inf
    return float(np.mean(finite))


@dataclass
class MetricRow:
    method: str
    clip_id: str
    n_frames: int
    psnr_db: float
    ssim: float
    channel_mode: str


@dataclass
class MetricReport:
    channel_mode: str
    crop_border: int = 0
    rows: list[MetricRow] = field(default_factory=list)

    def add_clip(self, method: str, clip_id: str, sr: Sequence[np.ndarray], gt: Sequence[np.ndarray]) -> MetricRow:
        if len(sr) != len(gt):
            raise ShapeMismatch("prediction and ground truth differ in frame count")
        p = [psnr(a, b, self.channel_mode, self.crop_border) for a, b in zip(sr, gt)]
        s = [ssim(a, b, self.channel_mode, self.crop_border) for a, b in zip(sr, gt)]
        row = MetricRow(method, clip_id, len(sr), mean_finite(p), float(np.mean(s)), normalize_mode(self.channel_mode))
        self.rows.append(row)
        return row

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    def mean(self, method: str) -> dict:
        rows = [r for r in self.rows if r.method == method]
        return {
            "psnr_db": mean_finite(r.psnr_db for r in rows),
            "ssim": float(np.mean([r.ssim for r in rows])) if rows else math.nan,
            "n_clips": len(rows),
        }

    def to_json(self) -> str:
        def enc(v):
            return "inf" if isinstance(v, float) and math.isinf(v) else v

        payload = {
            "channel_mode": normalize_mode(self.channel_mode),
            "crop_border": self.crop_border,
            "rows": [{k: enc(v) for k, v in asdict(r).items()} for r in self.rows],
            "mean": {m: {k: enc(v) for k, v in self.mean(m).items()} for m in self.methods()},
        }
        return json.dumps(payload, indent=2)

    def to_tsv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
        writer.writerow(["method", "clip_id", "n_frames", "psnr_db", "ssim", "channel_mode"])
        fmt = lambda v: "inf" if math.isinf(v) else f"{v:.4f}"  # noqa: E731
        for r in self.rows:
            writer.writerow([r.method, r.clip_id, r.n_frames, fmt(r.psnr_db), f"{r.ssim:.6f}", r.channel_mode])
        for m in self.methods():
            mean = self.mean(m)
            n = sum(r.n_frames for r in self.rows if r.method == m)
            writer.writerow([m, "MEAN", n, fmt(mean["psnr_db"]), f"{mean['ssim']:.6f}", normalize_mode(self.channel_mode)])
        return buf.getvalue()
