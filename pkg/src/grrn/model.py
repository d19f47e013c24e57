"""The three-part network: spatio-temporal feature extraction, a grouped
residual-in-residual body, and a pixel-shuffle upsampling head with a
bilinear skip from the middle input frame.

Inputs are windows of 2n+1 frames on the 0..255 scale, shaped
``(H, W, 2n+1, 3)`` (one leading batch axis allowed).  Internally everything
runs on the input scaled by 1/25.5, which keeps the residual the body must
produce at unit order; the final output is scaled back and, in inference
mode, clamped to [0, 255].
"""
from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .errors import DataError, ShapeError
from .kernels import ConvSpec
from .layers import (
    BatchRenorm,
    ChannelAttention,
    Conv2dLayer,
    Conv3dLayer,
    PReLU,
    bilinear_upsample,
    bilinear_upsample_backward,
    pixel_shuffle,
    pixel_unshuffle,
)
from .params import ParamStore

INPUT_SCALE = 1.0 / 25.5
UPSAMPLE_WIDTH = 64
FINAL_GAMMA_INIT = 0.1


class FeatureExtractor:
    """Per-frame 3x3 head followed by n temporal 3x3x3 stages; all stage
    outputs are concatenated over merged time/depth and compressed to the
    body width with a 1x1 convolution (no activation)."""

    def __init__(self, store: ParamStore, cfg: ModelConfig,
                 rng: np.random.Generator):
        s, n = cfg.s, cfg.n
        self.n = n
        self.s = s
        self.head = Conv3dLayer(store, "fe.head", (3, 3, 1), 3, s, rng)
        self.head_act = PReLU(store, "fe.head_act", s)
        self.tconvs = [Conv3dLayer(store, f"fe.t{k}", (3, 3, 3), s, s, rng)
                       for k in range(1, n + 1)]
        self.tacts = [PReLU(store, f"fe.t{k}_act", s) for k in range(1, n + 1)]
        concat_ch = (n + 1) * (n + 1) * s
        self.compress = Conv2dLayer(
            store, "fe.compress", ConvSpec(concat_ch, cfg.S, 1, 1), rng)
        # temporal extents of the stage outputs: 2n+1, 2n-1, ..., 1
        self._tshapes = [2 * (n - k) + 1 for k in range(n + 1)]

    def forward(self, x, train=False, trace=None):
        f = self.head_act.forward(self.head.forward(x, train), train)
        feats = [f]
        if trace is not None:
            trace["f0"] = f.shape
        for k, (conv, act) in enumerate(zip(self.tconvs, self.tacts), start=1):
            f = act.forward(conv.forward(f, train), train)
            feats.append(f)
            if trace is not None:
                trace[f"f{k}"] = f.shape
        n_, h, w = f.shape[0], f.shape[1], f.shape[2]
        cat = np.concatenate(
            [fk.reshape(n_, h, w, fk.shape[3] * self.s) for fk in feats],
            axis=-1)
        if trace is not None:
            trace["concat"] = cat.shape
        return self.compress.forward(cat, train)

    def backward(self, grad):
        g_cat = self.compress.backward(grad)
        n_, h, w = g_cat.shape[0], g_cat.shape[1], g_cat.shape[2]
        parts = []
        off = 0
        for t in self._tshapes:
            size = t * self.s
            parts.append(g_cat[..., off:off + size].reshape(n_, h, w, t, self.s))
            off += size
        g = parts[self.n]
        for k in range(self.n, 0, -1):
            g = self.tconvs[k - 1].backward(self.tacts[k - 1].backward(g))
            g = parts[k - 1] + g
        return self.head.backward(self.head_act.backward(g))


class ResidualBlock:
    """Group-isolated residual unit: normalization and grouped pointwise
    convolutions bracket two depthwise 3x3 stages; a channel-attention gate
    sits last on the branch before the skip addition.  Channel groups never
    mix inside the block (the gate weighs channels but reads the pooled map,
    which is the one cross-group signal)."""

    def __init__(self, store: ParamStore, prefix: str, cfg: ModelConfig,
                 rng: np.random.Generator):
        S, g = cfg.S, cfg.g
        self.bn_in = BatchRenorm(store, f"{prefix}.bn_in", S)
        self.pw_in = Conv2dLayer(store, f"{prefix}.pw_in",
                                 ConvSpec(S, S, 1, 1, groups=g), rng)
        self.act1 = PReLU(store, f"{prefix}.act1", S)
        self.dw1 = Conv2dLayer(store, f"{prefix}.dw1",
                               ConvSpec(S, S, 3, 3, groups=S), rng)
        self.act2 = PReLU(store, f"{prefix}.act2", S)
        self.dw2 = Conv2dLayer(store, f"{prefix}.dw2",
                               ConvSpec(S, S, 3, 3, groups=S), rng)
        self.act3 = PReLU(store, f"{prefix}.act3", S)
        self.pw_out = Conv2dLayer(store, f"{prefix}.pw_out",
                                  ConvSpec(S, S, 1, 1, groups=g), rng)
        self.bn_out = BatchRenorm(store, f"{prefix}.bn_out", S,
                                  gamma_init=FINAL_GAMMA_INIT)
        self.ca = (ChannelAttention(store, f"{prefix}.ca", S,
                                    cfg.attention_bottleneck, rng)
                   if cfg.use_channel_attention else None)
        self.pre_gate = None

    def forward(self, x, train=False):
        h = self.bn_in.forward(x, train)
        h = self.act1.forward(self.pw_in.forward(h, train), train)
        h = self.act2.forward(self.dw1.forward(h, train), train)
        h = self.act3.forward(self.dw2.forward(h, train), train)
        h = self.bn_out.forward(self.pw_out.forward(h, train), train)
        if train:
            self.pre_gate = h
        if self.ca is not None:
            h = self.ca.forward(h, train)
        return x + h

    def backward(self, grad):
        g = grad
        if self.ca is not None:
            g = self.ca.backward(g)
        g = self.pw_out.backward(self.bn_out.backward(g))
        g = self.dw2.backward(self.act3.backward(g))
        g = self.dw1.backward(self.act2.backward(g))
        g = self.pw_in.backward(self.act1.backward(g))
        g = self.bn_in.backward(g)
        return grad + g

    def bn_layers(self):
        return [self.bn_in, self.bn_out]


class ResidualGroup:
    """A chain of blocks between two ungrouped pointwise convolutions (the
    cross-group mixers) and a trailing normalization, wrapped in a skip."""

    def __init__(self, store: ParamStore, prefix: str, cfg: ModelConfig,
                 rng: np.random.Generator):
        S = cfg.S
        self.pw_in = Conv2dLayer(store, f"{prefix}.pw_in",
                                 ConvSpec(S, S, 1, 1), rng)
        self.blocks = [ResidualBlock(store, f"{prefix}.b{j}", cfg, rng)
                       for j in range(cfg.B)]
        self.pw_out = Conv2dLayer(store, f"{prefix}.pw_out",
                                  ConvSpec(S, S, 1, 1), rng)
        self.bn_end = BatchRenorm(store, f"{prefix}.bn_end", S,
                                  gamma_init=FINAL_GAMMA_INIT)

    def forward(self, x, train=False):
        h = self.pw_in.forward(x, train)
        for blk in self.blocks:
            h = blk.forward(h, train)
        h = self.bn_end.forward(self.pw_out.forward(h, train), train)
        return x + h

    def backward(self, grad):
        g = self.pw_out.backward(self.bn_end.backward(grad))
        for blk in reversed(self.blocks):
            g = blk.backward(g)
        g = self.pw_in.backward(g)
        return grad + g

    def bn_layers(self):
        out = []
        for blk in self.blocks:
            out.extend(blk.bn_layers())
        out.append(self.bn_end)
        return out


class UpsampleHead:
    """Compress the body output, refine with two 3x3 stages, emit 3*r*r
    channels, and shuffle them into the r-times-larger RGB residual."""

    def __init__(self, store: ParamStore, cfg: ModelConfig,
                 rng: np.random.Generator):
        S, r = cfg.S, cfg.scale_r
        w = UPSAMPLE_WIDTH
        self.r = r
        self.compress = Conv2dLayer(store, "up.compress",
                                    ConvSpec(S, w, 1, 1), rng)
        self.conv1 = Conv2dLayer(store, "up.conv1", ConvSpec(w, w, 3, 3), rng)
        self.act1 = PReLU(store, "up.act1", w)
        self.conv2 = Conv2dLayer(store, "up.conv2", ConvSpec(w, w, 3, 3), rng)
        self.act2 = PReLU(store, "up.act2", w)
        self.out = Conv2dLayer(store, "up.out", ConvSpec(w, 3 * r * r, 3, 3), rng)

    def forward(self, x, train=False):
        h = self.compress.forward(x, train)
        h = self.act1.forward(self.conv1.forward(h, train), train)
        h = self.act2.forward(self.conv2.forward(h, train), train)
        z = self.out.forward(h, train)
        return pixel_shuffle(z, self.r)

    def backward(self, grad):
        g = self.out.backward(pixel_unshuffle(grad, self.r))
        g = self.conv2.backward(self.act2.backward(g))
        g = self.conv1.backward(self.act1.backward(g))
        return self.compress.backward(g)


class Network:
    """A built model: parameter store plus the wired layer graph.

    Instances are safe for concurrent inference (``train=False`` writes no
    state); training mutates parameters and must have a single owner.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        self.fe = FeatureExtractor(self.params, config, rng)
        if config.use_rir:
            self.groups = [ResidualGroup(self.params, f"body.g{i}", config, rng)
                           for i in range(config.G)]
            self.flat_blocks = None
        else:
            # ablation: one flat run of B*G blocks under a single global skip
            self.groups = None
            self.flat_blocks = [
                ResidualBlock(self.params, f"body.b{j}", config, rng)
                for j in range(config.B * config.G)]
        self.upsample = UpsampleHead(self.params, config, rng)
        self._bn = []
        for part in (self.groups if config.use_rir else self.flat_blocks):
            self._bn.extend(part.bn_layers())

    @property
    def dtype(self):
        return self.fe.head.weight.value.dtype

    def bn_layers(self) -> list[BatchRenorm]:
        return list(self._bn)

    def freeze_batch_norm(self) -> None:
        for bn in self._bn:
            bn.freeze()

    def set_renorm_bounds(self, r_max: float, d_max: float) -> None:
        for bn in self._bn:
            bn.r_max = r_max
            bn.d_max = d_max

    def _validate(self, frames):
        want_t = self.config.frames
        if frames.ndim not in (4, 5) or frames.shape[-1] != 3:
            raise ShapeError(f"expected (H, W, {want_t}, 3) input, "
                             f"got {frames.shape}")
        if frames.shape[-2] != want_t:
            raise ShapeError(f"expected {want_t} frames, got {frames.shape[-2]}")
        if not ((frames >= 0).all() and (frames <= 255).all()):
            raise DataError("frame values must lie in [0, 255]")

    def forward(self, frames, train=False, trace=None):
        """Super-resolve the middle frame of a 2n+1 window (batch allowed).

        Output is on the 0..255 scale, clamped only in inference mode
        (``train=False``).
        """
        frames = np.asarray(frames)
        self._validate(frames)
        squeeze = frames.ndim == 4
        xb = frames[None] if squeeze else frames
        x = xb.astype(self.dtype, copy=False) * np.asarray(INPUT_SCALE, self.dtype)
        if trace is not None:
            trace["input"] = x.shape
        mid = x[:, :, :, self.config.n, :]
        feat = self.fe.forward(x, train, trace=trace)
        if trace is not None:
            trace["body_in"] = feat.shape
        h = feat
        if self.groups is not None:
            for i, grp in enumerate(self.groups):
                h = grp.forward(h, train)
                if trace is not None:
                    trace[f"group{i}"] = h.shape
        else:
            for blk in self.flat_blocks:
                h = blk.forward(h, train)
        body = feat + h
        if trace is not None:
            trace["body_out"] = body.shape
        res = self.upsample.forward(body, train)
        if trace is not None:
            trace["residual"] = res.shape
        base = bilinear_upsample(mid, self.config.scale_r)
        out = (res + base) * np.asarray(25.5, self.dtype)
        if not train:
            out = np.clip(out, 0.0, 255.0)
        if trace is not None:
            trace["output"] = out.shape
        return out[0] if squeeze else out

    def backward(self, grad_out):
        """Backpropagate a loss gradient w.r.t. the (unclamped) output;
        accumulates parameter gradients and returns the input gradient."""
        squeeze = grad_out.ndim == 3
        g = (grad_out[None] if squeeze else grad_out) * np.asarray(25.5, self.dtype)
        g_body = self.upsample.backward(g)
        g_h = g_body
        if self.groups is not None:
            for grp in reversed(self.groups):
                g_h = grp.backward(g_h)
        else:
            for blk in reversed(self.flat_blocks):
                g_h = blk.backward(g_h)
        g_feat = g_body + g_h
        g_x = self.fe.backward(g_feat)
        n_, h_in, w_in = g_x.shape[0], g_x.shape[1], g_x.shape[2]
        g_mid = bilinear_upsample_backward(g, h_in, w_in, self.config.scale_r)
        g_x[:, :, :, self.config.n, :] += g_mid
        g_frames = g_x * np.asarray(INPUT_SCALE, self.dtype)
        return g_frames[0] if squeeze else g_frames

    def infer(self, frames):
        return self.forward(frames, train=False)


def build(config: ModelConfig, seed: int = 0) -> Network:
    """Deterministically initialize a network from a seed."""
    return Network(config, seed)


def count_parameters(params: ParamStore) -> tuple[int, int]:
    """Exact (trainable, batchnorm) element counts; moving statistics are
    state, not learnables, and are excluded."""
    counts = params.count_by_kind()
    return counts["trainable"], counts["batchnorm"]
