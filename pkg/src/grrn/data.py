"""Dataset ingestion and synthesis.

Two on-disk layouts are understood:

* septuplet:  root/sequences/<seq>/<sub>/im1.png .. im7.png with
  sep_trainlist.txt / sep_testlist.txt listing "<seq>/<sub>" lines.  One
  clip per listed sequence; the middle frame is the target.
* frames:     root/<video>/frame_0001.png ...  One clip per frame, with
  temporal edge replication at the ends of the video.

Stored frames are the high-resolution ground truth; low-resolution inputs
are synthesized by bicubic downsampling (Catmull-Rom kernel a=-0.5 with the
antialias support widened by the scale factor), matching the standard
degradation used by published benchmarks.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError


# ---------------------------------------------------------------------------
# bicubic resampling

def _cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    at = np.abs(t)
    w = np.where(
        at <= 1.0,
        (a + 2.0) * at ** 3 - (a + 3.0) * at ** 2 + 1.0,
        np.where(at < 2.0,
                 a * at ** 3 - 5.0 * a * at ** 2 + 8.0 * a * at - 4.0 * a,
                 0.0))
    return w


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) bicubic weights with half-pixel centers;
    downscaling widens the kernel support by the scale ratio (antialias).
    Taps falling outside the image are dropped and the row renormalized,
    the convention reference resamplers use at borders."""
    scale = n_in / n_out
    kscale = max(scale, 1.0)
    support = 2.0 * kscale
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        center = (i + 0.5) * scale - 0.5
        lo = int(np.floor(center - support)) + 1
        hi = int(np.ceil(center + support))
        taps = np.arange(max(lo, 0), min(hi, n_in))
        w = _cubic((taps - center) / kscale)
        mat[i, taps] = w / w.sum()
    return mat


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bicubic resize of an (H, W, C) image; float64 inside,
    result in the input dtype.  Constants are preserved exactly up to
    rounding (each weight row sums to one)."""
    h, w = img.shape[0], img.shape[1]
    my = _resize_matrix(h, out_h)
    mx = _resize_matrix(w, out_w)
    out = np.tensordot(my, img.astype(np.float64), axes=(1, 0))
    out = np.tensordot(mx, out, axes=(1, 1)).transpose(1, 0, 2)
    return out.astype(img.dtype, copy=False)


def bicubic_downsample(hr: np.ndarray, r: int) -> np.ndarray:
    """Reduce each spatial extent by the integer factor r."""
    h, w = hr.shape[0], hr.shape[1]
    if h % r or w % r:
        raise DataError(f"image extents {(h, w)} not divisible by scale {r}")
    return bicubic_resize(hr, h // r, w // r)


# ---------------------------------------------------------------------------
# clips and manifests

@dataclass
class VideoClip:
    lr_stack: np.ndarray   # (H, W, 2n+1, 3) floats in [0, 255]
    hr_target: np.ndarray  # (rH, rW, 3) floats in [0, 255]
    clip_id: str

    @property
    def lr_frames(self) -> list[np.ndarray]:
        return [self.lr_stack[:, :, t, :] for t in range(self.lr_stack.shape[2])]


@dataclass
class DatasetManifest:
    root: Path
    entries: list[str]          # sequence dirs (septuplet) or video dirs
    split: str = "train"
    kind: str = "septuplet"     # "septuplet" | "frames"
    # frames layout only: per-entry frame counts, filled by the scanner
    frame_counts: list[int] | None = None

    def __len__(self) -> int:
        if self.kind == "septuplet":
            return len(self.entries)
        return sum(self.frame_counts)

    def clip_location(self, index: int) -> tuple[str, int | None]:
        if self.kind == "septuplet":
            return self.entries[index], None
        at = index
        for entry, count in zip(self.entries, self.frame_counts):
            if at < count:
                return entry, at
            at -= count
        raise DataError(f"clip index {index} out of range ({len(self)})")


def manifest_from_vimeo(root, split: str = "train") -> DatasetManifest:
    root = Path(root)
    list_file = root / ("sep_trainlist.txt" if split == "train"
                        else "sep_testlist.txt")
    if not list_file.exists():
        raise DataError(f"missing list file {list_file}")
    entries = [ln.strip() for ln in list_file.read_text().splitlines()
               if ln.strip()]
    if not entries:
        raise DataError(f"{list_file} lists no sequences")
    return DatasetManifest(root, entries, split=split, kind="septuplet")


def manifest_from_frames(root) -> DatasetManifest:
    root = Path(root)
    entries, counts = [], []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        frames = _frame_files(sub)
        if frames:
            entries.append(sub.name)
            counts.append(len(frames))
    if not entries:
        raise DataError(f"no frame folders under {root}")
    return DatasetManifest(root, entries, split="test", kind="frames",
                           frame_counts=counts)


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w") as fh:
        for entry in manifest.entries:
            fh.write(entry + "\n")


def _frame_files(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir()
                  if p.suffix.lower() == ".png" and p.is_file())


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float32)
    except FileNotFoundError:
        raise DataError(f"missing frame file {path}") from None
    except OSError as exc:
        raise DataError(f"cannot decode {path}: {exc}") from None


def write_image(path, array: np.ndarray) -> None:
    data = np.clip(np.asarray(array), 0.0, 255.0)
    Image.fromarray(np.round(data).astype(np.uint8), mode="RGB").save(path)


def _crop_multiple(img: np.ndarray, r: int) -> np.ndarray:
    h = img.shape[0] - img.shape[0] % r
    w = img.shape[1] - img.shape[1] % r
    return img[:h, :w]


def load_clip(manifest: DatasetManifest, index: int, n: int,
              scale: int) -> VideoClip:
    """Materialize one training/eval clip: 2n+1 LR frames plus the HR target
    for the window center."""
    entry, center = manifest.clip_location(index)
    if manifest.kind == "septuplet":
        seq_dir = Path(manifest.root) / "sequences" / entry
        count = 2 * n + 1
        hr_frames = [read_image(seq_dir / f"im{i}.png") for i in range(1, count + 1)]
        shapes = {f.shape for f in hr_frames}
        if len(shapes) != 1:
            raise DataError(f"inconsistent frame sizes in {seq_dir}: {shapes}")
        hr_frames = [_crop_multiple(f, scale) for f in hr_frames]
        window = hr_frames
        target = hr_frames[n]
        clip_id = entry
    else:
        video_dir = Path(manifest.root) / entry
        files = _frame_files(video_dir)
        total = len(files)
        idxs = [min(max(center + d, 0), total - 1) for d in range(-n, n + 1)]
        window = [_crop_multiple(read_image(files[i]), scale) for i in idxs]
        shapes = {f.shape for f in window}
        if len(shapes) != 1:
            raise DataError(f"inconsistent frame sizes in {video_dir}: {shapes}")
        target = window[n]
        clip_id = f"{entry}/{files[center].stem}"
    lr = np.stack([np.clip(bicubic_downsample(f, scale), 0.0, 255.0)
                   for f in window], axis=2).astype(np.float32)
    return VideoClip(lr, target.astype(np.float32), clip_id)


def load_all(manifest: DatasetManifest, n: int, scale: int) -> list[VideoClip]:
    return [load_clip(manifest, i, n, scale) for i in range(len(manifest))]


# ---------------------------------------------------------------------------
# synthetic clips

def _synthetic_frame(kind: int, rng_params: dict, t_off: float,
                     hh: int, ww: int) -> np.ndarray:
    """Evaluate one analytic pattern at frame offset t (sub-pixel motion)."""
    y, x = np.mgrid[0:hh, 0:ww].astype(np.float64)
    vx, vy = rng_params["vel"]
    xs = x - t_off * vx
    ys = y - t_off * vy
    chans = []
    for c in range(3):
        if kind == 0:
            theta = rng_params["theta"] + 0.2 * c
            f = np.cos(theta) * xs + np.sin(theta) * ys
            f = f / (abs(np.cos(theta)) * ww + abs(np.sin(theta)) * hh + 1e-9)
            f = 0.5 + 0.5 * np.sin(2 * np.pi * (f + 0.13 * c))
        elif kind == 1:
            f = np.zeros_like(xs)
            for amp, fx, fy, ph in rng_params["waves"]:
                f += amp * np.sin(2 * np.pi * (fx * xs + fy * ys) + ph + 0.4 * c)
            f = 0.5 + 0.5 * f / rng_params["amp_total"]
        else:
            fx, fy = rng_params["freq"]
            f = (np.sin(2 * np.pi * fx * xs + 0.3 * c)
                 * np.sin(2 * np.pi * fy * ys + 0.7 * c))
            f = 0.5 + 0.5 * f
        chans.append(f)
    img = np.stack(chans, axis=-1)
    return 10.0 + 235.0 * np.clip(img, 0.0, 1.0)


def _clip_params(rng: np.random.Generator, kind: int, scale: int) -> dict:
    params = {"vel": rng.uniform(-scale, scale, size=2)}
    if kind == 0:
        params["theta"] = rng.uniform(0, np.pi)
    elif kind == 1:
        waves = []
        for _ in range(4):
            waves.append((rng.uniform(0.3, 1.0),
                          rng.uniform(-0.08, 0.08),
                          rng.uniform(-0.08, 0.08),
                          rng.uniform(0, 2 * np.pi)))
        params["waves"] = waves
        params["amp_total"] = sum(w[0] for w in waves) + 1e-9
    else:
        params["freq"] = rng.uniform(0.02, 0.09, size=2)
    return params


def make_synthetic(out_dir, count: int, height: int, width: int, scale: int,
                   seed: int, n: int = 3) -> DatasetManifest:
    """Write ``count`` procedurally generated HR septuplet-style clips
    (moving gradients, wave textures, translating patterns with sub-pixel
    motion) in the septuplet layout.  Deterministic for a given seed."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    root = Path(out_dir)
    frames = 2 * n + 1
    hh, ww = height * scale, width * scale
    entries = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        kind = i % 3
        params = _clip_params(rng, kind, scale)
        entry = f"{i // 1000 + 1:05d}/{i % 1000 + 1:04d}"
        seq_dir = root / "sequences" / entry
        os.makedirs(seq_dir, exist_ok=True)
        for t in range(frames):
            img = _synthetic_frame(kind, params, t - n, hh, ww)
            write_image(seq_dir / f"im{t + 1}.png", img)
        entries.append(entry)
    manifest = DatasetManifest(root, entries, split="train", kind="septuplet")
    write_manifest(manifest, root / "sep_trainlist.txt")
    write_manifest(manifest, root / "sep_testlist.txt")
    return manifest
