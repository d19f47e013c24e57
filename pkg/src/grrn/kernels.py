"""Dense convolution and linear-algebra kernels with analytic backward passes.

Layout convention: row-major with channels innermost.  A single feature map
is ``(H, W, C)``; spatio-temporal maps are ``(H, W, T, C)``.  Every kernel
also accepts the same array with one extra leading batch axis and returns a
result of matching rank.  All kernels are pure functions and compute in the
dtype of their inputs, so the production float32 path and the float64 mode
used by gradient tests share one code path.

Strides are always 1.  Spatial padding is either "same" (zero fill, output
extent equals input extent, asymmetric for even kernels) or "valid".  The
temporal axis of conv3d always uses valid padding, so a length-kt kernel
shrinks T by kt - 1.

Backward passes are hand-derived transposes of the forward maps; summation
order per output element is fixed (taps iterated in a fixed order), so
repeated evaluation is bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 2-D convolution."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    groups: int = 1
    padding: str = "same"  # "same" | "valid"
    has_bias: bool = True

    def __post_init__(self):
        if self.groups < 1:
            raise ConfigError(f"groups must be >= 1, got {self.groups}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible "
                f"by groups={self.groups}"
            )
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.kernel_h, self.kernel_w, self.in_channels // self.groups,
                self.out_channels)

    @property
    def weight_count(self) -> int:
        kh, kw, cg, co = self.weight_shape
        return kh * kw * cg * co


def _same_pad(k: int) -> tuple[int, int]:
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def _as_batched(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"expected rank {rank} or {rank + 1}, got shape {x.shape}")


def conv2d(x: np.ndarray, spec: ConvSpec, weights: np.ndarray,
           bias: np.ndarray | None = None) -> np.ndarray:
    """Grouped 2-D convolution over an (H, W, Cin) map (or batch thereof)."""
    xb, squeeze = _as_batched(x, 3)
    _check_conv2d_args(xb, spec, weights, bias)
    out = _conv2d_core(xb, spec, weights)
    if bias is not None:
        out = out + bias
    return out[0] if squeeze else out


def conv2d_backward(x: np.ndarray, spec: ConvSpec, weights: np.ndarray,
                    grad_out: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. (input, weights, bias) given the upstream
    cotangent.  ``x`` must be the forward input."""
    xb, squeeze = _as_batched(x, 3)
    gb_, _ = _as_batched(grad_out, 3)
    _check_conv2d_args(xb, spec, weights, None)
    gx, gw = _conv2d_core_backward(xb, spec, weights, gb_)
    gbias = gb_.sum(axis=(0, 1, 2))
    return (gx[0] if squeeze else gx), gw, gbias


def _check_conv2d_args(xb, spec, weights, bias):
    if xb.shape[-1] != spec.in_channels:
        raise ShapeError(
            f"input has {xb.shape[-1]} channels, spec expects {spec.in_channels}"
        )
    if weights.shape != spec.weight_shape:
        raise ShapeError(
            f"weights shape {weights.shape} != expected {spec.weight_shape}"
        )
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({spec.out_channels},)")
    if spec.padding == "valid":
        if xb.shape[1] < spec.kernel_h or xb.shape[2] < spec.kernel_w:
            raise ShapeError("input smaller than kernel under valid padding")


def _pad2d(xb: np.ndarray, spec: ConvSpec) -> np.ndarray:
    if spec.padding == "valid" or (spec.kernel_h == 1 and spec.kernel_w == 1):
        return xb
    (pt, pb), (pl, pr) = _same_pad(spec.kernel_h), _same_pad(spec.kernel_w)
    return np.pad(xb, ((0, 0), (pt, pb), (pl, pr), (0, 0)))


def _conv2d_core(xb, spec, weights):
    n, h, w, cin = xb.shape
    kh, kw, g = spec.kernel_h, spec.kernel_w, spec.groups
    cing, coutg = cin // g, spec.out_channels // g
    xp = _pad2d(xb, spec)
    ho, wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    w5 = weights.reshape(kh, kw, cing, g, coutg)
    out = np.zeros((n, ho, wo, g, coutg), dtype=xb.dtype)
    for dh in range(kh):
        for dw in range(kw):
            xs = xp[:, dh:dh + ho, dw:dw + wo].reshape(n, ho, wo, g, cing)
            out += np.einsum("nhwgc,cgj->nhwgj", xs, w5[dh, dw])
    return out.reshape(n, ho, wo, spec.out_channels)


def _conv2d_core_backward(xb, spec, weights, grad_out):
    n, h, w, cin = xb.shape
    kh, kw, g = spec.kernel_h, spec.kernel_w, spec.groups
    cing, coutg = cin // g, spec.out_channels // g
    xp = _pad2d(xb, spec)
    ho, wo = grad_out.shape[1], grad_out.shape[2]
    w5 = weights.reshape(kh, kw, cing, g, coutg)
    go5 = grad_out.reshape(n, ho, wo, g, coutg)
    gw5 = np.zeros_like(w5)
    gxp = np.zeros_like(xp)
    for dh in range(kh):
        for dw in range(kw):
            xs = xp[:, dh:dh + ho, dw:dw + wo].reshape(n, ho, wo, g, cing)
            gw5[dh, dw] = np.einsum("nhwgc,nhwgj->cgj", xs, go5)
            gxs = np.einsum("nhwgj,cgj->nhwgc", go5, w5[dh, dw])
            gxp[:, dh:dh + ho, dw:dw + wo] += gxs.reshape(n, ho, wo, cin)
    if spec.padding == "same" and (kh > 1 or kw > 1):
        (pt, _), (pl, _) = _same_pad(kh), _same_pad(kw)
        gx = gxp[:, pt:pt + h, pl:pl + w]
    else:
        gx = gxp
    return gx, gw5.reshape(kh, kw, cing, spec.out_channels)


def conv3d(x: np.ndarray, weights: np.ndarray,
           bias: np.ndarray | None = None) -> np.ndarray:
    """3-D convolution over (H, W, T, Cin): same spatial padding, valid
    temporal padding, so the temporal extent shrinks to T - kt + 1."""
    xb, squeeze = _as_batched(x, 4)
    kh, kw, kt, cin, cout = _check_conv3d_args(xb, weights, bias)
    n, h, w, t, _ = xb.shape
    to = t - kt + 1
    xp = _pad3d(xb, kh, kw)
    out = np.zeros((n, h, w, to, cout), dtype=xb.dtype)
    for dh in range(kh):
        for dw in range(kw):
            for dt in range(kt):
                xs = xp[:, dh:dh + h, dw:dw + w, dt:dt + to]
                out += np.einsum("nhwtc,co->nhwto", xs, weights[dh, dw, dt])
    if bias is not None:
        out += bias
    return out[0] if squeeze else out


def conv3d_backward(x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xb, squeeze = _as_batched(x, 4)
    go, _ = _as_batched(grad_out, 4)
    kh, kw, kt, cin, cout = _check_conv3d_args(xb, weights, None)
    n, h, w, t, _ = xb.shape
    to = t - kt + 1
    xp = _pad3d(xb, kh, kw)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(weights)
    for dh in range(kh):
        for dw in range(kw):
            for dt in range(kt):
                xs = xp[:, dh:dh + h, dw:dw + w, dt:dt + to]
                gw[dh, dw, dt] = np.einsum("nhwtc,nhwto->co", xs, go)
                gxp[:, dh:dh + h, dw:dw + w, dt:dt + to] += np.einsum(
                    "nhwto,co->nhwtc", go, weights[dh, dw, dt])
    if kh > 1 or kw > 1:
        (pt, _), (pl, _) = _same_pad(kh), _same_pad(kw)
        gx = gxp[:, pt:pt + h, pl:pl + w]
    else:
        gx = gxp
    gbias = go.sum(axis=(0, 1, 2, 3))
    return (gx[0] if squeeze else gx), gw, gbias


def _check_conv3d_args(xb, weights, bias):
    if weights.ndim != 5:
        raise ShapeError(f"conv3d weights must be rank 5, got {weights.shape}")
    kh, kw, kt, cin, cout = weights.shape
    if xb.shape[-1] != cin:
        raise ShapeError(f"input has {xb.shape[-1]} channels, weights expect {cin}")
    if kt > xb.shape[3]:
        raise ShapeError(
            f"temporal kernel {kt} exceeds temporal extent {xb.shape[3]}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    return kh, kw, kt, cin, cout


def _pad3d(xb, kh, kw):
    if kh == 1 and kw == 1:
        return xb
    (pt, pb), (pl, pr) = _same_pad(kh), _same_pad(kw)
    return np.pad(xb, ((0, 0), (pt, pb), (pl, pr), (0, 0), (0, 0)))


def fully_connected(x: np.ndarray, weights: np.ndarray,
                    bias: np.ndarray | None = None) -> np.ndarray:
    """Affine map of a channel vector: out[d] = sum_c x[c] w[c, d] + b[d]."""
    xb, squeeze = _as_batched(x, 1)
    if weights.ndim != 2 or xb.shape[-1] != weights.shape[0]:
        raise ShapeError(
            f"fc shapes disagree: input {x.shape}, weights {weights.shape}"
        )
    out = xb @ weights
    if bias is not None:
        if bias.shape != (weights.shape[1],):
            raise ShapeError(f"bias shape {bias.shape} != ({weights.shape[1]},)")
        out = out + bias
    return out[0] if squeeze else out


def fully_connected_backward(x: np.ndarray, weights: np.ndarray,
                             grad_out: np.ndarray
                             ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xb, squeeze = _as_batched(x, 1)
    go, _ = _as_batched(grad_out, 1)
    gx = go @ weights.T
    gw = xb.T @ go
    gbias = go.sum(axis=0)
    return (gx[0] if squeeze else gx), gw, gbias


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Spatial mean per channel: (H, W, C) -> (C,)."""
    xb, squeeze = _as_batched(x, 3)
    out = xb.mean(axis=(1, 2))
    return out[0] if squeeze else out


def global_avg_pool_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    xb, squeeze = _as_batched(x, 3)
    go, _ = _as_batched(grad_out, 1)
    n, h, w, c = xb.shape
    gx = np.broadcast_to(go[:, None, None, :] / (h * w), xb.shape).astype(xb.dtype)
    gx = np.ascontiguousarray(gx)
    return gx[0] if squeeze else gx
