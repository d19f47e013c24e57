"""One finite-difference trial per layer type, shared by the layer tests and
the acceptance gate.  Each entry builds a randomized small instance, runs the
analytic backward, and checks it against central differences at the requested
dtype (float64: tol 1e-4; float32: tol 1e-2 with a rounding-noise floor)."""
from __future__ import annotations

import numpy as np

from grrn.kernels import ConvSpec, conv2d, conv2d_backward
from grrn.kernels import conv3d, conv3d_backward
from grrn.layers import (
    BatchRenorm,
    ChannelAttention,
    PReLU,
    charbonnier_loss,
    pixel_shuffle,
    pixel_unshuffle,
)
from grrn.params import ParamStore

from gradcheck import FLOOR32, H_STEP, H_STEP32, check_grad

TOL = {np.float64: 1e-4, np.float32: 1e-2}
FLOOR = {np.float64: 1e-6, np.float32: FLOOR32}
STEP = {np.float64: H_STEP, np.float32: H_STEP32}


def _check(f, x, analytic, dtype):
    check_grad(f, x, analytic, tol=TOL[dtype], floor=FLOOR[dtype],
               h=STEP[dtype])


def _conv2d_trial(seed, dtype, groups_of):
    rng = np.random.default_rng(seed)
    cin = int(rng.integers(1, 4))
    cout = int(rng.integers(1, 4))
    g = groups_of(rng, cin, cout)
    cin, cout = cin * g, cout * g
    if groups_of is _depthwise:
        cout = cin = g
    spec = ConvSpec(cin, cout, 3, 3, groups=g) if groups_of is not _pointwise \
        else ConvSpec(cin, cout, 1, 1, groups=g)
    h, w_ = int(rng.integers(3, 6)), int(rng.integers(3, 6))
    x = rng.normal(size=(h, w_, cin)).astype(dtype)
    w = rng.normal(size=spec.weight_shape).astype(dtype)
    gout = rng.normal(size=(h, w_, cout)).astype(dtype)

    def loss():
        return float((conv2d(x, spec, w) * gout).sum())

    gx, gw, _ = conv2d_backward(x, spec, w, gout)
    _check(loss, x, gx, dtype)
    _check(loss, w, gw, dtype)


def _grouped(rng, cin, cout):
    return int(rng.choice([2, 3]))


def _depthwise(rng, cin, cout):
    return int(rng.integers(2, 5))


def _pointwise(rng, cin, cout):
    return 1


def conv2d_grouped(seed, dtype):
    _conv2d_trial(seed, dtype, _grouped)


def conv2d_depthwise(seed, dtype):
    _conv2d_trial(seed, dtype, _depthwise)


def conv2d_pointwise(seed, dtype):
    _conv2d_trial(seed, dtype, _pointwise)


def conv3d_full(seed, dtype):
    rng = np.random.default_rng(seed)
    cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    kt = int(rng.choice([1, 3]))
    t = int(rng.integers(kt, kt + 2))
    x = rng.normal(size=(3, 3, t, cin)).astype(dtype)
    w = rng.normal(size=(3, 3, kt, cin, cout)).astype(dtype)
    gout = rng.normal(size=(3, 3, t - kt + 1, cout)).astype(dtype)

    def loss():
        return float((conv3d(x, w) * gout).sum())

    gx, gw, _ = conv3d_backward(x, w, gout)
    _check(loss, x, gx, dtype)
    _check(loss, w, gw, dtype)


def prelu(seed, dtype):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 5))
    store = ParamStore()
    layer = PReLU(store, "p", c)
    store.astype(dtype)
    x = rng.normal(size=(4, 3, c)).astype(dtype)
    # keep samples away from the kink so differences stay one-sided
    x = np.where(np.abs(x) < 0.05, np.asarray(0.1, dtype), x)
    gout = rng.normal(size=x.shape).astype(dtype)

    def loss():
        return float((layer.forward(x, train=True) * gout).sum())

    layer.forward(x, train=True)
    store.zero_grads()
    gx = layer.backward(gout)
    _check(loss, x, gx, dtype)
    _check(loss, layer.a.value, layer.a.grad, dtype)


def batchnorm_train(seed, dtype):
    """Train-mode path with nondegenerate correction factors pinned to the
    values of the base point (the backward treats them as constants)."""
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 4))
    store = ParamStore()
    layer = BatchRenorm(store, "bn", c)
    store.astype(dtype)
    layer.r_max, layer.d_max = 2.0, 3.0
    layer.mov_mean.value[...] = rng.normal(size=c).astype(dtype) * 0.3
    layer.mov_var.value[...] = (0.5 + rng.random(size=c)).astype(dtype)
    mov_snapshot = (layer.mov_mean.value.copy(), layer.mov_var.value.copy())
    x = rng.normal(size=(3, 2, 2, c)).astype(dtype)
    gout = rng.normal(size=x.shape).astype(dtype)
    layer.forward(x, train=True)
    _, _, _, _, r = layer._cache
    sigma_mov = np.sqrt(mov_snapshot[1] + np.asarray(layer.eps, dtype))
    mu_b = x.mean(axis=(0, 1, 2))
    d = np.clip((mu_b - mov_snapshot[0]) / sigma_mov, -layer.d_max, layer.d_max)
    layer.pinned_correction = (r.copy(), d.copy())

    def loss():
        layer.mov_mean.value[...] = mov_snapshot[0]
        layer.mov_var.value[...] = mov_snapshot[1]
        return float((layer.forward(x, train=True) * gout).sum())

    loss()
    store.zero_grads()
    gx = layer.backward(gout)
    _check(loss, x, gx, dtype)
    _check(loss, layer.gamma.value, layer.gamma.grad, dtype)
    _check(loss, layer.beta.value, layer.beta.grad, dtype)


def batchnorm_frozen(seed, dtype):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 4))
    store = ParamStore()
    layer = BatchRenorm(store, "bn", c)
    store.astype(dtype)
    layer.mov_mean.value[...] = rng.normal(size=c).astype(dtype)
    layer.mov_var.value[...] = (0.5 + rng.random(size=c)).astype(dtype)
    layer.freeze()
    x = rng.normal(size=(2, 3, 2, c)).astype(dtype)
    gout = rng.normal(size=x.shape).astype(dtype)

    def loss():
        return float((layer.forward(x, train=True) * gout).sum())

    layer.forward(x, train=True)
    store.zero_grads()
    gx = layer.backward(gout)
    _check(loss, x, gx, dtype)


def channel_attention(seed, dtype):
    rng = np.random.default_rng(seed)
    c = int(rng.choice([2, 4, 6]))
    store = ParamStore()
    layer = ChannelAttention(store, "ca", c, max(1, c // 2), rng)
    store.astype(dtype)
    x = rng.normal(size=(3, 4, c)).astype(dtype)
    gout = rng.normal(size=x.shape).astype(dtype)

    def loss():
        return float((layer.forward(x, train=True) * gout).sum())

    layer.forward(x, train=True)
    store.zero_grads()
    gx = layer.backward(gout)
    _check(loss, x, gx, dtype)
    for p in (layer.w1, layer.b1, layer.w2, layer.b2):
        _check(loss, p.value, p.grad, dtype)


def pixelshuffle(seed, dtype):
    rng = np.random.default_rng(seed)
    r = int(rng.choice([2, 3]))
    c = int(rng.integers(1, 3))
    x = rng.normal(size=(3, 2, c * r * r)).astype(dtype)
    gout = rng.normal(size=(6 if r == 2 else 9, 4 if r == 2 else 6, c)).astype(dtype)

    def loss():
        return float((pixel_shuffle(x, r) * gout).sum())

    gx = pixel_unshuffle(gout, r)
    _check(loss, x, gx, dtype)


def charbonnier(seed, dtype):
    rng = np.random.default_rng(seed)
    shape = tuple(int(rng.integers(1, 5)) for _ in range(3))
    pred = rng.normal(size=shape).astype(dtype)
    target = rng.normal(size=shape).astype(dtype)
    # with eps=1e-3 the loss bends sharply within ~eps of zero difference;
    # keep samples outside that region or differences cannot resolve it
    pred = np.where(np.abs(pred - target) < 0.05,
                    target + np.asarray(0.1, dtype), pred)

    def loss():
        return charbonnier_loss(pred, target, eps=1e-3).value

    g = charbonnier_loss(pred, target, eps=1e-3).grad
    _check(loss, pred, g, dtype)


LAYER_CHECKS = {
    "conv2d_grouped": conv2d_grouped,
    "conv2d_depthwise": conv2d_depthwise,
    "conv2d_pointwise": conv2d_pointwise,
    "conv3d": conv3d_full,
    "prelu": prelu,
    "batchnorm_train": batchnorm_train,
    "batchnorm_frozen": batchnorm_frozen,
    "channel_attention": channel_attention,
    "pixel_shuffle": pixelshuffle,
    "charbonnier": charbonnier,
}
