"""Training loop: Charbonnier objective, Adam, stepwise learning-rate
halving, and the batch-normalization freeze after the initial epochs.

Determinism contract: given the same seed, data, and plan, two runs produce
bit-identical parameters.  Shuffling and augmentation draw from a fresh
generator seeded by (seed, epoch), so resuming from an epoch-boundary
checkpoint replays the remaining epochs exactly.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import save_checkpoint
from .errors import ConfigError, NumericError
from .layers import charbonnier_loss
from .metrics import score
from .model import Network
from .params import ParamStore


@dataclass
class TrainPlan:
    initial_lr: float = 4e-4
    milestones: tuple[int, ...] = (10, 20, 30, 40, 50)
    batch_size: int = 16
    bn_freeze_epoch: int = 5
    epochs: int = 60
    seed: int = 0
    augment: bool = True
    grad_clip: float = 0.0          # 0 disables
    charbonnier_eps: float = 1e-3
    renorm_r_max: float = 3.0       # ramp targets over the unfrozen epochs
    renorm_d_max: float = 5.0
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ConfigError("initial_lr must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.batch_size < 2 and self.bn_freeze_epoch > 0:
            raise ConfigError(
                "batch_size must be >= 2 while batch norm is unfrozen")
        if list(self.milestones) != sorted(self.milestones):
            raise ConfigError("milestones must be sorted ascending")


def lr_at(epoch: int, plan: TrainPlan) -> float:
    """Piecewise-constant rate: halved at each passed milestone, at most
    five times (a floor of initial/32)."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    k = min(5, sum(1 for m in plan.milestones if epoch >= m))
    return plan.initial_lr * (0.5 ** k)


def renorm_bounds(epoch: int, plan: TrainPlan) -> tuple[float, float]:
    """Clip bounds ramp linearly from (1, 0) to the plan targets across the
    unfrozen epochs, starting as plain batch normalization."""
    span = max(1, plan.bn_freeze_epoch - 1)
    frac = min(1.0, epoch / span)
    return 1.0 + (plan.renorm_r_max - 1.0) * frac, plan.renorm_d_max * frac


class Adam:
    """Bias-corrected Adam over a ParamStore; frozen tensors are skipped and
    moment buffers are created lazily per parameter."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in store.updatable():
            if p.grad.shape != p.value.shape:
                raise ConfigError(f"gradient shape mismatch for {p.name}")
            m = self.m.get(p.name)
            if m is None:
                m = self.m[p.name] = np.zeros_like(p.value)
                self.v[p.name] = np.zeros_like(p.value)
            v = self.v[p.name]
            m[...] = self.beta1 * m + (1.0 - self.beta1) * p.grad
            v[...] = self.beta2 * v + (1.0 - self.beta2) * p.grad * p.grad
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def restore_optimizer(ckpt) -> Adam:
    """Rebuild an Adam instance from a loaded checkpoint (moments live in the
    tensor section under "adam.m:"/"adam.v:" prefixes)."""
    hyper = ckpt.adam or {}
    opt = Adam(beta1=hyper.get("beta1", 0.9), beta2=hyper.get("beta2", 0.999),
               eps=hyper.get("eps", 1e-8))
    opt.t = int(hyper.get("t", 0))
    for name, val in ckpt.tensors.items():
        if name.startswith("adam.m:"):
            opt.m[name[len("adam.m:"):]] = val.copy()
        elif name.startswith("adam.v:"):
            opt.v[name[len("adam.v:"):]] = val.copy()
    return opt


@dataclass
class TrainLog:
    step_losses: list[float] = field(default_factory=list)
    lr_by_epoch: list[float] = field(default_factory=list)
    freeze_events: list[int] = field(default_factory=list)
    # (epoch, mean psnr dB, mean ssim) when validation clips are supplied
    val_scores: list[tuple[int, float, float]] = field(default_factory=list)

    def halvings(self) -> int:
        count = 0
        for prev, cur in zip(self.lr_by_epoch, self.lr_by_epoch[1:]):
            if cur < prev:
                count += 1
        return count

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "loss"])
            for i, loss in enumerate(self.step_losses):
                wr.writerow([i, f"{loss:.8f}"])

    def summary(self) -> str:
        lines = [f"steps: {len(self.step_losses)}"]
        if self.step_losses:
            lines.append(f"final loss: {self.step_losses[-1]:.6f}")
        lines.append(f"lr halvings: {self.halvings()}")
        for e in self.freeze_events:
            lines.append(f"batch norm frozen at epoch {e}")
        if self.val_scores:
            e, p, s = self.val_scores[-1]
            lines.append(f"validation at epoch {e}: {p:.2f} dB / {s:.4f}")
        return "\n".join(lines)


def _first_non_finite(net: Network, out) -> str:
    for p in net.params:
        if not np.isfinite(p.value).all():
            return f"parameter {p.name}"
        if not np.isfinite(p.grad).all():
            return f"gradient of {p.name}"
    if out is not None and not np.isfinite(out).all():
        return "network output"
    return "loss"


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch]))


def _augment_batch(frames, targets, rng):
    """Shape-preserving per-sample flips plus one 90-degree rotation applied
    to the whole batch (keeps the stacked shapes rectangular)."""
    frames = frames.copy()
    targets = targets.copy()
    for i in range(frames.shape[0]):
        if rng.random() < 0.5:
            frames[i] = np.flip(frames[i], axis=1)
            targets[i] = np.flip(targets[i], axis=1)
        if rng.random() < 0.5:
            frames[i] = np.flip(frames[i], axis=0)
            targets[i] = np.flip(targets[i], axis=0)
    if rng.random() < 0.5:
        frames = np.ascontiguousarray(np.rot90(frames, 1, axes=(1, 2)))
        targets = np.ascontiguousarray(np.rot90(targets, 1, axes=(1, 2)))
    return frames, targets


def _batches(order, batch_size, min_size):
    for lo in range(0, len(order), batch_size):
        chunk = order[lo:lo + batch_size]
        if len(chunk) >= min_size:
            yield chunk


def train(net: Network, clips, plan: TrainPlan, out_dir=None,
          optimizer: Adam | None = None, start_epoch: int = 0,
          log: TrainLog | None = None, progress=None, val_clips=None
          ) -> tuple[ParamStore, TrainLog]:
    """Run the optimization loop over a list of clips.

    ``clips`` is a sequence of objects with ``lr_stack`` (H, W, 2n+1, 3) and
    ``hr_target`` (rH, rW, 3) arrays on the 0..255 scale.  When ``out_dir``
    is given, a checkpoint is written each epoch; when ``val_clips`` is
    given, mean PSNR/SSIM over them is logged per epoch.  Returns the
    (mutated) parameter store and the log.
    """
    if len(clips) == 0:
        raise ConfigError("training dataset is empty")
    opt = optimizer or Adam()
    log = log or TrainLog()
    step = opt.t
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    frames_all = np.stack([c.lr_stack for c in clips])
    targets_all = np.stack([c.hr_target for c in clips])

    for epoch in range(start_epoch, plan.epochs):
        if epoch == plan.bn_freeze_epoch:
            net.freeze_batch_norm()
            log.freeze_events.append(epoch)
        frozen = epoch >= plan.bn_freeze_epoch
        if not frozen:
            net.set_renorm_bounds(*renorm_bounds(epoch, plan))
        lr = lr_at(epoch, plan)
        rng = _epoch_rng(plan.seed, epoch)
        order = rng.permutation(len(clips))
        min_size = 1 if frozen else 2
        for chunk in _batches(order, plan.batch_size, min_size):
            frames = frames_all[chunk]
            targets = targets_all[chunk]
            if plan.augment:
                frames, targets = _augment_batch(frames, targets, rng)
            out = net.forward(frames, train=True)
            lv = charbonnier_loss(out / 255.0, targets / 255.0,
                                  eps=plan.charbonnier_eps)
            if not np.isfinite(lv.value):
                raise NumericError(
                    f"non-finite loss at step {step}; first non-finite "
                    f"tensor: {_first_non_finite(net, out)}")
            net.params.zero_grads()
            net.backward(lv.grad / 255.0)
            if plan.grad_clip > 0:
                total = np.sqrt(sum(float((p.grad ** 2).sum())
                                    for p in net.params.updatable()))
                if total > plan.grad_clip:
                    scale = plan.grad_clip / total
                    for p in net.params.updatable():
                        p.grad *= scale
            opt.step(net.params, lr)
            log.step_losses.append(lv.value)
            step += 1
        log.lr_by_epoch.append(lr)
        if val_clips:
            pairs = [score(net.infer(c.lr_stack), c.hr_target)
                     for c in val_clips]
            log.val_scores.append(
                (epoch, float(np.mean([p.psnr for p in pairs])),
                 float(np.mean([p.ssim for p in pairs]))))
        if progress is not None:
            progress(epoch, log)
        if out_dir is not None and (
                (epoch + 1) % plan.checkpoint_every == 0
                or epoch == plan.epochs - 1):
            path = os.path.join(out_dir, f"ckpt_epoch{epoch:04d}.grrn")
            save_checkpoint(path, net, epoch=epoch + 1, step=step, optimizer=opt)
            save_checkpoint(os.path.join(out_dir, "ckpt_last.grrn"), net,
                            epoch=epoch + 1, step=step, optimizer=opt)
    return net.params, log
