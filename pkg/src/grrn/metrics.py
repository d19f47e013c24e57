"""Quality scoring (PSNR/SSIM), dihedral test-time augmentation, and
dataset-level evaluation reports.

Scores are computed on the BT.601 luminance channel of [0,1]-normalized
images by default (``channel="y"``); ``channel="rgb"`` averages over the
color planes instead.  No border cropping is applied.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError

_BT601 = np.array([0.299, 0.587, 0.114], dtype=np.float64)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class ScorePair:
    psnr: float  # dB, may be +inf
    ssim: float


def _to_planes(img: np.ndarray, channel: str) -> list[np.ndarray]:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return [img]
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {img.shape}")
    if channel == "y":
        return [img @ _BT601]
    if channel == "rgb":
        return [img[..., c] for c in range(3)]
    raise DataError(f"unknown metric channel {channel!r}")


def psnr(a: np.ndarray, b: np.ndarray, channel: str = "y") -> float:
    """Peak signal-to-noise ratio in dB over [0,1]-normalized images;
    +inf for identical inputs."""
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"psnr shapes differ: {np.shape(a)} vs {np.shape(b)}")
    planes_a = _to_planes(a, channel)
    planes_b = _to_planes(b, channel)
    mse = float(np.mean([np.mean((pa - pb) ** 2)
                         for pa, pb in zip(planes_a, planes_b)]))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(win: int, sigma: float) -> np.ndarray:
    ax = np.arange(win, dtype=np.float64) - (win - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, kern1d: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with a 1-D kernel on both axes."""
    win = kern1d.size
    h, w = img.shape
    rows = np.zeros((h - win + 1, w), dtype=np.float64)
    for k in range(win):
        rows += kern1d[k] * img[k:k + h - win + 1, :]
    out = np.zeros((h - win + 1, w - win + 1), dtype=np.float64)
    for k in range(win):
        out += kern1d[k] * rows[:, k:k + w - win + 1]
    return out


def ssim(a: np.ndarray, b: np.ndarray, channel: str = "y") -> float:
    """Mean local structural similarity with an 11x11 Gaussian window
    (sigma 1.5) over [0,1]-normalized images."""
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"ssim shapes differ: {np.shape(a)} vs {np.shape(b)}")
    planes_a = _to_planes(a, channel)
    planes_b = _to_planes(b, channel)
    if planes_a[0].shape[0] < SSIM_WINDOW or planes_a[0].shape[1] < SSIM_WINDOW:
        raise ShapeError(
            f"image {planes_a[0].shape} smaller than the "
            f"{SSIM_WINDOW}x{SSIM_WINDOW} window")
    kern = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    vals = []
    for pa, pb in zip(planes_a, planes_b):
        mu_a = _filter_valid(pa, kern)
        mu_b = _filter_valid(pb, kern)
        var_a = _filter_valid(pa * pa, kern) - mu_a ** 2
        var_b = _filter_valid(pb * pb, kern) - mu_b ** 2
        cov = _filter_valid(pa * pb, kern) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


def score(pred: np.ndarray, target: np.ndarray, channel: str = "y") -> ScorePair:
    """Score a 0..255 prediction against its 0..255 ground truth."""
    a = np.asarray(pred, dtype=np.float64) / 255.0
    b = np.asarray(target, dtype=np.float64) / 255.0
    return ScorePair(psnr(a, b, channel), ssim(a, b, channel))


# ---------------------------------------------------------------------------
# dihedral group and test-time augmentation

class Dihedral:
    """One of the eight flip/rotation symmetries of the plane, applied to
    the leading two (spatial) axes of an array."""

    def __init__(self, rot: int, hflip: bool):
        self.rot = rot % 4
        self.hflip = hflip

    def apply(self, arr: np.ndarray) -> np.ndarray:
        out = np.flip(arr, axis=1) if self.hflip else arr
        return np.ascontiguousarray(np.rot90(out, self.rot, axes=(0, 1)))

    def invert(self, arr: np.ndarray) -> np.ndarray:
        out = np.rot90(arr, -self.rot, axes=(0, 1))
        if self.hflip:
            out = np.flip(out, axis=1)
        return np.ascontiguousarray(out)

    def __repr__(self):
        return f"Dihedral(rot={self.rot}, hflip={self.hflip})"


DIHEDRAL_GROUP = [Dihedral(rot, flip) for flip in (False, True)
                  for rot in range(4)]


def tta_infer(forward_fn, frames: np.ndarray) -> np.ndarray:
    """Symmetrized inference: run ``forward_fn`` on all eight dihedral
    transforms of the frame window and average the back-transformed outputs.

    ``frames`` is (H, W, T, 3); the transforms act on the spatial axes only.
    """
    acc = None
    for t in DIHEDRAL_GROUP:
        out = t.invert(forward_fn(t.apply(frames)))
        acc = out if acc is None else acc + out
    return acc / len(DIHEDRAL_GROUP)


# ---------------------------------------------------------------------------
# dataset evaluation

@dataclass
class EvalRow:
    clip_id: str
    psnr: float
    ssim: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    mean_psnr: float
    mean_ssim: float

    def as_csv(self) -> str:
        def cell(v):
            return "" if math.isinf(v) else f"{v:.4f}"
        lines = ["clip_id,psnr_db,ssim"]
        for r in self.rows:
            lines.append(f"{r.clip_id},{cell(r.psnr)},{r.ssim:.4f}")
        lines.append(f"mean,{cell(self.mean_psnr)},{self.mean_ssim:.4f}")
        return "\n".join(lines) + "\n"

    def as_text(self) -> str:
        def cell(v):
            return "inf" if math.isinf(v) else f"{v:.2f}"
        width = max([len("clip")] + [len(r.clip_id) for r in self.rows])
        lines = [f"{'clip':<{width}}  {'PSNR':>8}  {'SSIM':>7}"]
        for r in self.rows:
            lines.append(f"{r.clip_id:<{width}}  {cell(r.psnr):>8}  "
                         f"{r.ssim:>7.4f}")
        lines.append(f"{'mean':<{width}}  {cell(self.mean_psnr):>8}  "
                     f"{self.mean_ssim:>7.4f}")
        return "\n".join(lines) + "\n"


def worker_count() -> int:
    raw = os.environ.get("GRRN_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def evaluate(predict_fn, load_fn, count: int, channel: str = "y") -> EvalReport:
    """Score ``predict_fn`` over a dataset of ``count`` clips.

    ``load_fn(i)`` returns a clip; ``predict_fn(clip)`` returns the 0..255
    super-resolved middle frame.  Iteration order is fixed (clip index);
    clips may be scored in parallel (GRRN_THREADS caps the workers).
    """
    if count == 0:
        raise DataError("evaluation dataset is empty")

    def one(i: int) -> EvalRow:
        clip = load_fn(i)
        pred = predict_fn(clip)
        s = score(pred, clip.hr_target, channel)
        return EvalRow(clip.clip_id, s.psnr, s.ssim)

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, range(count)))
    else:
        rows = [one(i) for i in range(count)]
    mean_psnr = float(np.mean([r.psnr for r in rows]))
    mean_ssim = float(np.mean([r.ssim for r in rows]))
    return EvalReport(rows, mean_psnr, mean_ssim)
