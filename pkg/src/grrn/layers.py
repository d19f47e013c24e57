"""Network layers: parametric activations, normalization, attention, loss.

Layers are stateful objects: ``forward(x, train=...)`` caches whatever the
hand-written ``backward(grad)`` needs, and backward accumulates parameter
gradients into their ``.grad`` buffers while returning the input gradient.
Inference calls (``train=False``) write no state, so a built model can serve
concurrent forward passes.

Feature maps are channels-last; layers accept one leading batch axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .kernels import (
    ConvSpec,
    conv2d,
    conv2d_backward,
    conv3d,
    conv3d_backward,
    fully_connected,
    fully_connected_backward,
)
from .params import ParamStore


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class _Cached:
    """Mixin raising a clear error when backward precedes forward."""

    _cache = None

    def _take_cache(self):
        if self._cache is None:
            raise RuntimeError(
                f"{type(self).__name__}.backward called before forward"
            )
        return self._cache


class Conv2dLayer(_Cached):
    def __init__(self, store: ParamStore, prefix: str, spec: ConvSpec,
                 rng: np.random.Generator):
        self.spec = spec
        fan_in = spec.kernel_h * spec.kernel_w * spec.in_channels // spec.groups
        self.weight = store.add(f"{prefix}.weight",
                                he_uniform(rng, spec.weight_shape, fan_in))
        self.bias = (store.add(f"{prefix}.bias",
                               np.zeros(spec.out_channels, dtype=np.float32))
                     if spec.has_bias else None)

    def forward(self, x, train=False):
        if train:
            self._cache = x
        return conv2d(x, self.spec, self.weight.value,
                      None if self.bias is None else self.bias.value)

    def backward(self, grad_out):
        x = self._take_cache()
        gx, gw, gb = conv2d_backward(x, self.spec, self.weight.value, grad_out)
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += gb
        return gx


class Conv3dLayer(_Cached):
    def __init__(self, store: ParamStore, prefix: str, kernel: tuple[int, int, int],
                 in_channels: int, out_channels: int, rng: np.random.Generator):
        kh, kw, kt = kernel
        fan_in = kh * kw * kt * in_channels
        self.weight = store.add(
            f"{prefix}.weight",
            he_uniform(rng, (kh, kw, kt, in_channels, out_channels), fan_in))
        self.bias = store.add(f"{prefix}.bias",
                              np.zeros(out_channels, dtype=np.float32))

    def forward(self, x, train=False):
        if train:
            self._cache = x
        return conv3d(x, self.weight.value, self.bias.value)

    def backward(self, grad_out):
        x = self._take_cache()
        gx, gw, gb = conv3d_backward(x, self.weight.value, grad_out)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


class PReLU(_Cached):
    """Per-channel leaky rectifier with a learnable negative slope."""

    def __init__(self, store: ParamStore, prefix: str, channels: int,
                 init: float = 0.25):
        self.a = store.add(f"{prefix}.a",
                           np.full(channels, init, dtype=np.float32))

    def forward(self, x, train=False):
        if x.shape[-1] != self.a.size:
            raise ShapeError(
                f"prelu expects {self.a.size} channels, got {x.shape[-1]}")
        if train:
            self._cache = x
        return np.where(x >= 0, x, self.a.value * x)

    def backward(self, grad_out):
        x = self._take_cache()
        neg = x < 0
        gx = grad_out * np.where(neg, self.a.value, np.asarray(1.0, x.dtype))
        ga = (grad_out * np.where(neg, x, np.asarray(0.0, x.dtype)))
        self.a.grad += ga.reshape(-1, ga.shape[-1]).sum(axis=0)
        return gx


class BatchRenorm(_Cached):
    """Batch normalization with moving-average correction and a freeze switch.

    In training, activations are normalized by minibatch statistics and then
    corrected toward the moving averages via the clipped factors
    ``r = clip(sigma_batch/sigma_mov, 1/r_max, r_max)`` and
    ``d = clip((mu_batch - mu_mov)/sigma_mov, -d_max, d_max)``; both are
    constants for the backward pass.  With ``r_max=1, d_max=0`` the layer is
    plain batch normalization.  Frozen (or eval-mode) layers normalize by the
    moving statistics only and mutate nothing, so training and evaluation
    become identical.
    """

    def __init__(self, store: ParamStore, prefix: str, channels: int,
                 momentum: float = 0.99, eps: float = 1e-5,
                 gamma_init: float = 1.0):
        self.gamma = store.add(f"{prefix}.gamma",
                               np.full(channels, gamma_init, dtype=np.float32),
                               kind="batchnorm")
        self.beta = store.add(f"{prefix}.beta",
                              np.zeros(channels, dtype=np.float32),
                              kind="batchnorm")
        self.mov_mean = store.add(f"{prefix}.mov_mean",
                                  np.zeros(channels, dtype=np.float32),
                                  kind="stat")
        self.mov_var = store.add(f"{prefix}.mov_var",
                                 np.ones(channels, dtype=np.float32),
                                 kind="stat")
        self.momentum = momentum
        self.eps = eps
        self.frozen = False
        self.r_max = 1.0
        self.d_max = 0.0
        # test hook: when set, (r, d) are used verbatim so finite differences
        # see the same constants the analytic backward assumes
        self.pinned_correction = None

    def freeze(self):
        self.frozen = True
        self.gamma.frozen = True
        self.beta.frozen = True

    def forward(self, x, train=False):
        use_batch = train and not self.frozen
        if use_batch:
            if x.ndim < 2 or x.shape[0] < 2:
                raise ConfigError(
                    "batch normalization needs minibatch size >= 2 in "
                    "unfrozen training mode")
            axes = tuple(range(x.ndim - 1))
            mu_b = x.mean(axis=axes)
            var_b = x.var(axis=axes)
            sigma_b = np.sqrt(var_b + np.asarray(self.eps, x.dtype))
            sigma_mov = np.sqrt(self.mov_var.value + np.asarray(self.eps, x.dtype))
            if self.pinned_correction is not None:
                r, d = self.pinned_correction
            else:
                r = np.clip(sigma_b / sigma_mov, 1.0 / self.r_max, self.r_max)
                d = np.clip((mu_b - self.mov_mean.value) / sigma_mov,
                            -self.d_max, self.d_max)
            z = (x - mu_b) / sigma_b
            xhat = r * z + d
            m = self.momentum
            self.mov_mean.value[...] = m * self.mov_mean.value + (1 - m) * mu_b
            self.mov_var.value[...] = m * self.mov_var.value + (1 - m) * var_b
            self._cache = ("batch", z, xhat, sigma_b, r)
        else:
            sigma = np.sqrt(self.mov_var.value + np.asarray(self.eps, x.dtype))
            xhat = (x - self.mov_mean.value) / sigma
            if train:
                self._cache = ("moving", xhat, sigma)
        return self.gamma.value * xhat + self.beta.value

    def backward(self, grad_out):
        cache = self._take_cache()
        axes = tuple(range(grad_out.ndim - 1))
        if cache[0] == "batch":
            _, z, xhat, sigma_b, r = cache
            self.gamma.grad += (grad_out * xhat).sum(axis=axes)
            self.beta.grad += grad_out.sum(axis=axes)
            gz = grad_out * self.gamma.value * r
            gx = (gz - gz.mean(axis=axes)
                  - z * (gz * z).mean(axis=axes)) / sigma_b
            return gx.astype(grad_out.dtype, copy=False)
        _, xhat, sigma = cache
        self.gamma.grad += (grad_out * xhat).sum(axis=axes)
        self.beta.grad += grad_out.sum(axis=axes)
        return grad_out * (self.gamma.value / sigma)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class ChannelAttention(_Cached):
    """Squeeze-and-gate: pooled channel statistics pass through a bottleneck
    pair of fully-connected layers and a sigmoid; each channel of the input
    is scaled by its gate, which therefore lies strictly in (0, 1)."""

    def __init__(self, store: ParamStore, prefix: str, channels: int,
                 bottleneck: int, rng: np.random.Generator):
        self.w1 = store.add(f"{prefix}.w1",
                            he_uniform(rng, (channels, bottleneck), channels))
        self.b1 = store.add(f"{prefix}.b1", np.zeros(bottleneck, dtype=np.float32))
        self.w2 = store.add(f"{prefix}.w2",
                            he_uniform(rng, (bottleneck, channels), bottleneck))
        self.b2 = store.add(f"{prefix}.b2", np.zeros(channels, dtype=np.float32))

    def forward(self, x, train=False):
        squeeze = x.ndim == 3
        xb = x[None] if squeeze else x
        n, h, w, c = xb.shape
        pooled = xb.mean(axis=(1, 2))
        h1 = fully_connected(pooled, self.w1.value, self.b1.value)
        a1 = np.maximum(h1, 0)
        h2 = fully_connected(a1, self.w2.value, self.b2.value)
        gate = _sigmoid(h2)
        out = xb * gate[:, None, None, :]
        if train:
            self._cache = (xb, pooled, h1, a1, gate, squeeze)
        return out[0] if squeeze else out

    def backward(self, grad_out):
        xb, pooled, h1, a1, gate, squeeze = self._take_cache()
        gb = grad_out[None] if squeeze else grad_out
        n, h, w, c = xb.shape
        ggate = (gb * xb).sum(axis=(1, 2))
        gx = gb * gate[:, None, None, :]
        gh2 = ggate * gate * (1 - gate)
        ga1, gw2, gb2 = fully_connected_backward(a1, self.w2.value, gh2)
        gh1 = ga1 * (h1 > 0)
        gpool, gw1, gb1 = fully_connected_backward(pooled, self.w1.value, gh1)
        self.w1.grad += gw1
        self.b1.grad += gb1
        self.w2.grad += gw2
        self.b2.grad += gb2
        gx = gx + gpool[:, None, None, :] / (h * w)
        return gx[0] if squeeze else gx


def pixel_shuffle(z: np.ndarray, r: int) -> np.ndarray:
    """Rearrange r*r channel planes into r x r spatial blocks.

    Channel layout is plane-major: output pixel (r*x + l, r*y + k) of color c
    reads input channel c*r*r + r*l + k at (x, y).  Bijective on elements.
    """
    squeeze = z.ndim == 3
    zb = z[None] if squeeze else z
    n, h, w, ch = zb.shape
    if ch % (r * r) != 0:
        raise ShapeError(f"channel count {ch} not divisible by r^2={r * r}")
    c = ch // (r * r)
    z6 = zb.reshape(n, h, w, c, r, r)
    out = np.ascontiguousarray(z6.transpose(0, 1, 4, 2, 5, 3))
    out = out.reshape(n, h * r, w * r, c)
    return out[0] if squeeze else out


def pixel_unshuffle(y: np.ndarray, r: int) -> np.ndarray:
    """Exact inverse of :func:`pixel_shuffle`."""
    squeeze = y.ndim == 3
    yb = y[None] if squeeze else y
    n, hr, wr, c = yb.shape
    if hr % r or wr % r:
        raise ShapeError(f"spatial extents {(hr, wr)} not divisible by r={r}")
    h, w = hr // r, wr // r
    y6 = yb.reshape(n, h, r, w, r, c)
    out = np.ascontiguousarray(y6.transpose(0, 1, 3, 5, 2, 4))
    out = out.reshape(n, h, w, c * r * r)
    return out[0] if squeeze else out


def _bilinear_axis(n_in: int, r: int):
    """Half-pixel source indices/weights for one axis of an r-fold upsample."""
    out = np.arange(n_in * r, dtype=np.float64)
    src = (out + 0.5) / r - 0.5
    i0 = np.floor(src).astype(np.int64)
    t = src - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    return lo, hi, t


def bilinear_upsample(x: np.ndarray, r: int) -> np.ndarray:
    """Separable half-pixel bilinear upsample with edge clamping."""
    if r == 1:
        return x.copy()
    squeeze = x.ndim == 3
    xb = x[None] if squeeze else x
    n, h, w, c = xb.shape
    ylo, yhi, ty = _bilinear_axis(h, r)
    xlo, xhi, tx = _bilinear_axis(w, r)
    ty = ty.astype(xb.dtype)[None, :, None, None]
    tx = tx.astype(xb.dtype)[None, None, :, None]
    rows = xb[:, ylo] * (1 - ty) + xb[:, yhi] * ty
    out = rows[:, :, xlo] * (1 - tx) + rows[:, :, xhi] * tx
    return out[0] if squeeze else out


def bilinear_upsample_backward(grad_out: np.ndarray, in_h: int, in_w: int,
                               r: int) -> np.ndarray:
    """Transpose of :func:`bilinear_upsample` (scatter with the same weights)."""
    if r == 1:
        return grad_out.copy()
    squeeze = grad_out.ndim == 3
    gb = grad_out[None] if squeeze else grad_out
    n, hr, wr, c = gb.shape
    ylo, yhi, ty = _bilinear_axis(in_h, r)
    xlo, xhi, tx = _bilinear_axis(in_w, r)
    ty = ty.astype(gb.dtype)[None, :, None, None]
    tx = tx.astype(gb.dtype)[None, None, :, None]
    grows = np.zeros((n, in_h, wr, c), dtype=gb.dtype)
    np.add.at(grows, (slice(None), ylo), gb * (1 - ty))
    np.add.at(grows, (slice(None), yhi), gb * ty)
    gx = np.zeros((n, in_h, in_w, c), dtype=gb.dtype)
    np.add.at(gx, (slice(None), slice(None), xlo), grows * (1 - tx))
    np.add.at(gx, (slice(None), slice(None), xhi), grows * tx)
    return gx[0] if squeeze else gx


@dataclass
class LossValue:
    value: float
    grad: np.ndarray


def charbonnier_loss(pred: np.ndarray, target: np.ndarray,
                     eps: float = 1e-3) -> LossValue:
    """Smooth L1 surrogate: mean of sqrt(diff^2 + eps^2).

    The value is always >= eps, with equality iff pred equals target.  The
    returned gradient is w.r.t. ``pred``.
    """
    if eps <= 0:
        raise ConfigError(f"charbonnier eps must be > 0, got {eps}")
    if pred.shape != target.shape:
        raise ShapeError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    root = np.sqrt(diff * diff + np.asarray(eps * eps, pred.dtype))
    return LossValue(float(root.mean()), diff / root / diff.size)
