"""Frame sequences, BD degradation, patch sampling and synthetic clips.

Pixels are kept as float32 in [0, 1] with layout ``(N, 3, H, W)``. 8-bit
quantization only happens when reading or writing PNG files.
"""

from __future__ import annotations

import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import correlate1d

from .errors import EmptyDataset, InvalidDataset, NotFound, ShapeMismatch

SCALE = 4


@dataclass
class FrameSequence:
    """An ordered clip of RGB frames.

    Attributes:
        frames: float32 array of shape (N, 3, H, W) with values in [0, 1].
        clip_id: identifier of the clip the frames came from.
        frame_rate: optional frames per second, informational only.
    """

    frames: np.ndarray
    clip_id: str = ""
    frame_rate: Optional[float] = None

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 4 or frames.shape[1] != 3:
            raise ShapeMismatch(f"expected frames of shape (N, 3, H, W), got {frames.shape}")
        if frames.shape[0] < 1:
            raise EmptyDataset("a frame sequence needs at least one frame")
        if not np.all(np.isfinite(frames)) or frames.min() < 0.0 or frames.max() > 1.0:
            raise ValueError("pixel values must be finite and lie in [0, 1]")
        self.frames = frames

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[2]

    @property
    def width(self) -> int:
        return self.frames.shape[3]


@dataclass
class TrainingSample:
    lr: FrameSequence
    hr: FrameSequence
    clip_id: str
    origin: tuple[int, int]  # (row, col) in LR pixels
    start_frame: int

    def __post_init__(self):
        if len(self.lr) != len(self.hr):
            raise ShapeMismatch("lr and hr patch sequences differ in length")
        if (self.hr.height, self.hr.width) != (SCALE * self.lr.height, SCALE * self.lr.width):
            raise ShapeMismatch("hr patch must be exactly 4x the lr patch")


@dataclass(frozen=True)
class DegradationSpec:
    """Blur-downsampling parameters. Gaussian sigma is in HR pixels."""

    scale: int = SCALE
    blur_sigma: float = 1.6
    kernel_size: int = 13

    def __post_init__(self):
        if self.scale != SCALE:
            raise ValueError(f"only x{SCALE} degradation is supported")
        if self.blur_sigma <= 0:
            raise ValueError("blur_sigma must be positive")
        min_size = math.ceil(4 * self.blur_sigma + 1)
        if min_size % 2 == 0:
            min_size += 1
        if self.kernel_size % 2 == 0 or self.kernel_size < min_size:
            raise ValueError(f"kernel_size must be odd and >= {min_size} for sigma={self.blur_sigma}")


@dataclass
class ClipPair:
    """One dataset entry. ``hr`` is None for inference-only clips."""

    lr: FrameSequence
    hr: Optional[FrameSequence] = None

    @property
    def clip_id(self) -> str:
        return self.lr.clip_id


def natural_key(name: str) -> list:
    return [int(tok) if tok.isdigit() else tok.lower() for tok in re.split(r"(\d+)", name)]


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def to_uint8(frame: np.ndarray) -> np.ndarray:
    """Quantize a (3, H, W) float frame in [0, 1] to an (H, W, 3) uint8 image."""
    return np.clip(np.round(np.asarray(frame, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def write_png(path: Path, frame: np.ndarray) -> None:
    Image.fromarray(to_uint8(frame)).save(path, format="PNG")


def list_frames(directory: Path, pattern: str = "*.png") -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise NotFound(f"no such directory: {directory}")
    return sorted((p for p in directory.glob(pattern) if p.is_file()), key=lambda p: natural_key(p.name))


def load_sequence(directory, pattern: str = "*.png", workers: int = 1) -> FrameSequence:
    """Read every image matching ``pattern`` in ``directory`` as one clip.

    Files are ordered by natural sort of their names, so ``frame2.png``
    precedes ``frame10.png``.
    """
    paths = list_frames(directory, pattern)
    if not paths:
        raise EmptyDataset(f"no images matching {pattern!r} in {directory}")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        frames = list(pool.map(read_png, paths))
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ShapeMismatch(f"mixed frame dimensions in {directory}: {sorted(shapes)}")
    return FrameSequence(np.stack(frames), clip_id=Path(directory).name)


def save_sequence(seq: FrameSequence, directory, names: Optional[Sequence[str]] = None, workers: int = 1) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if names is None:
        names = [f"{i:08d}.png" for i in range(len(seq))]
    if len(names) != len(seq):
        raise ShapeMismatch("one file name per frame is required")
    paths = [directory / n for n in names]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        list(pool.map(write_png, paths, seq.frames))
    return paths


def gaussian_kernel1d(sigma: float, size: int) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def blur_subsample(frames: np.ndarray, spec: DegradationSpec = DegradationSpec()) -> np.ndarray:
    """Gaussian blur with mirror padding, then keep every ``scale``-th pixel from index 0.

    Works on any ``(..., H, W)`` array in float64 and does not clip, so it is
    exactly linear in its input.
    """
    frames = np.asarray(frames, dtype=np.float64)
    h, w = frames.shape[-2:]
    if h % spec.scale or w % spec.scale:
        raise ShapeMismatch(f"frame size {h}x{w} is not divisible by {spec.scale}")
    k = gaussian_kernel1d(spec.blur_sigma, spec.kernel_size)
    out = correlate1d(frames, k, axis=-2, mode="mirror")
    out = correlate1d(out, k, axis=-1, mode="mirror")
    return out[..., :: spec.scale, :: spec.scale]


def bd_degrade(hr: FrameSequence, spec: DegradationSpec = DegradationSpec()) -> FrameSequence:
    """Blur-downsample an HR clip by ``spec.scale``."""
    lr = np.clip(blur_subsample(hr.frames, spec), 0.0, 1.0).astype(np.float32)
    return FrameSequence(lr, clip_id=hr.clip_id, frame_rate=hr.frame_rate)


def sample_patch(hr: FrameSequence, lr: FrameSequence, patch: int, n_frames: int, rng_seed: int) -> TrainingSample:
    """Crop a temporally contiguous LR patch and the matching HR window.

    Draws from ``np.random.default_rng(rng_seed)`` in this order: start frame,
    top row, left column, each with ``integers(0, n_valid)``.
    """
    if (hr.height, hr.width) != (SCALE * lr.height, SCALE * lr.width) or len(hr) != len(lr):
        raise ShapeMismatch("hr clip must be the x4 counterpart of lr clip")
    if patch > lr.height or patch > lr.width:
        raise ShapeMismatch(f"patch {patch} larger than lr frame {lr.height}x{lr.width}")
    if n_frames > len(lr) or n_frames < 1:
        raise ShapeMismatch(f"cannot take {n_frames} frames from a clip of length {len(lr)}")
    rng = np.random.default_rng(rng_seed)
    t0 = int(rng.integers(0, len(lr) - n_frames + 1))
    top = int(rng.integers(0, lr.height - patch + 1))
    left = int(rng.integers(0, lr.width - patch + 1))
    lr_crop = lr.frames[t0 : t0 + n_frames, :, top : top + patch, left : left + patch]
    hr_crop = hr.frames[
        t0 : t0 + n_frames, :, SCALE * top : SCALE * (top + patch), SCALE * left : SCALE * (left + patch)
    ]
    return TrainingSample(
        lr=FrameSequence(lr_crop.copy(), clip_id=lr.clip_id),
        hr=FrameSequence(hr_crop.copy(), clip_id=hr.clip_id),
        clip_id=lr.clip_id,
        origin=(top, left),
        start_frame=t0,
    )


def _texture_params(rng: np.random.Generator, size: int, n_waves: int = 12):
    # integer frequencies keep the texture periodic on the size x size torus;
    # capping them at half the LR Nyquist rate keeps the x4 LR frames alias-free
    fmax = max(1, size // 16)
    freqs = rng.integers(-fmax, fmax + 1, size=(n_waves, 2))
    freqs[np.all(freqs == 0, axis=1)] = (1, 0)
    phases = rng.uniform(0, 2 * np.pi, size=n_waves)
    colors = rng.uniform(-1.0, 1.0, size=(n_waves, 3)) / np.sqrt(np.abs(freqs).sum(axis=1, keepdims=True))
    return freqs, phases, colors


def _render_texture(params, size: int, shift: float) -> np.ndarray:
    freqs, phases, colors = params
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    img = np.zeros((3, size, size))
    for (fx, fy), ph, col in zip(freqs, phases, colors):
        wave = np.cos(2 * np.pi * (fx * (xx - shift) + fy * yy) / size + ph)
        img += col[:, None, None] * wave[None]
    return img


def make_synthetic_dataset(
    n_clips: int,
    n_frames: int,
    hr_size: int,
    motion: float,
    rng_seed: int,
    spec: DegradationSpec = DegradationSpec(),
) -> list[ClipPair]:
    """Build clips of periodic textures translating horizontally.

    Content moves ``motion`` HR pixels to the right per frame (wrapping
    around), so with ``motion=4`` the LR frames shift by exactly one pixel.
    """
    if hr_size % SCALE:
        raise ShapeMismatch(f"hr_size {hr_size} is not divisible by {SCALE}")
    if n_clips < 1 or n_frames < 1:
        raise EmptyDataset("need at least one clip with one frame")
    rng = np.random.default_rng(rng_seed)
    pairs = []
    for c in range(n_clips):
        params = _texture_params(rng, hr_size)
        frames = np.stack([_render_texture(params, hr_size, motion * t) for t in range(n_frames)])
        lo, hi = frames.min(), frames.max()
        frames = 0.05 + 0.9 * (frames - lo) / max(hi - lo, 1e-12)
        hr = FrameSequence(frames.astype(np.float32), clip_id=f"{c:03d}")
        pairs.append(ClipPair(lr=bd_degrade(hr, spec), hr=hr))
    return pairs


def write_dataset(pairs: Sequence[ClipPair], root, manifest: Optional[dict] = None, workers: int = 1) -> Path:
    """Write HR frames as ``<root>/<clip_id>/<index:08d>.png`` plus ``manifest.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for pair in pairs:
        if pair.hr is None:
            raise InvalidDataset(f"clip {pair.clip_id} has no HR frames to write")
        save_sequence(pair.hr, root / pair.clip_id, workers=workers)
    info = dict(manifest or {})
    info["clips"] = [p.clip_id for p in pairs]
    info["n_frames"] = [len(p.hr) for p in pairs]
    (root / "manifest.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    return root


def load_dataset(root, spec: DegradationSpec = DegradationSpec(), workers: int = 1) -> list[ClipPair]:
    """Read every clip directory under ``root`` and synthesize LR via BD degradation."""
    root = Path(root)
    if not root.is_dir():
        raise NotFound(f"no such dataset root: {root}")
    clip_dirs = sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: natural_key(d.name))
    if not clip_dirs:
        raise EmptyDataset(f"no clip directories under {root}")
    pairs = []
    for d in clip_dirs:
        hr = load_sequence(d, workers=workers)
        pairs.append(ClipPair(lr=bd_degrade(hr, spec), hr=hr))
    return pairs
