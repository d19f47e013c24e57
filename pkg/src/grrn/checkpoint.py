"""Binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"GRRN"
    u32     format version (currently 1)
    u32     text length, then that many UTF-8 bytes of "key=value" lines
            (model config, counters, optimizer hyperparameters, flags)
    u32     tensor record count
    records u16 name length, name bytes, u8 rank, rank x u32 extents,
            raw little-endian float32 values

Tensor records hold every parameter (including moving statistics) in store
order, followed by optimizer moments under "adam.m:<name>" / "adam.v:<name>".
Writes are atomic (temp file + rename); loads validate magic, version, and
shape consistency against the embedded config and report the byte offset of
any corruption.
"""
from __future__ import annotations

import dataclasses
import io
import os
import struct
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import CheckpointError
from .model import Network, build

MAGIC = b"GRRN"
VERSION = 1

_CONFIG_FIELDS = [f.name for f in dataclasses.fields(ModelConfig)]


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    epoch: int
    step: int
    bn_frozen: bool
    adam: dict[str, float] | None  # t, beta1, beta2, eps when present


def _config_text(ckpt: Checkpoint) -> str:
    lines = []
    for name in _CONFIG_FIELDS:
        val = getattr(ckpt.config, name)
        if isinstance(val, bool):
            val = "true" if val else "false"
        lines.append(f"model.{name}={val}")
    lines.append(f"epoch={ckpt.epoch}")
    lines.append(f"step={ckpt.step}")
    lines.append(f"bn_frozen={'true' if ckpt.bn_frozen else 'false'}")
    if ckpt.adam is not None:
        for k in ("t", "beta1", "beta2", "eps"):
            lines.append(f"adam.{k}={ckpt.adam[k]!r}")
    return "\n".join(lines) + "\n"


def _parse_text(text: str) -> tuple[ModelConfig, dict]:
    kv = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, val = line.partition("=")
        kv[key.strip()] = val.strip()
    cfg_args = {}
    for name in _CONFIG_FIELDS:
        raw = kv.pop(f"model.{name}", None)
        if raw is None:
            raise CheckpointError(f"config field {name!r} missing from header")
        if raw in ("true", "false"):
            cfg_args[name] = raw == "true"
        else:
            cfg_args[name] = int(raw)
    return ModelConfig(**cfg_args), kv


def save_checkpoint(path, net: Network, epoch: int = 0, step: int = 0,
                    optimizer=None) -> None:
    """Serialize a network (and optionally its Adam state) atomically."""
    adam = None
    moments: list[tuple[str, np.ndarray]] = []
    if optimizer is not None:
        adam = {"t": optimizer.t, "beta1": optimizer.beta1,
                "beta2": optimizer.beta2, "eps": optimizer.eps}
        for name in optimizer.m:
            moments.append((f"adam.m:{name}", optimizer.m[name]))
            moments.append((f"adam.v:{name}", optimizer.v[name]))
    frozen = all(bn.frozen for bn in net.bn_layers()) and bool(net.bn_layers())
    ckpt = Checkpoint(net.config, {}, epoch, step, frozen, adam)

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    text = _config_text(ckpt).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    records = [(p.name, p.value) for p in net.params] + moments
    buf.write(struct.pack("<I", len(records)))
    for name, value in records:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", value.ndim))
        for ext in value.shape:
            buf.write(struct.pack("<I", ext))
        buf.write(np.ascontiguousarray(value, dtype="<f4").tobytes())

    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes for {what} at byte "
                f"offset {self.off}, file has {len(self.data)}")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def u8(self, what):
        return struct.unpack("<B", self.take(1, what))[0]

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    rd = _Reader(data)
    magic = rd.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at byte offset 0")
    version = rd.u32("version")
    if version != VERSION:
        raise CheckpointError(
            f"unsupported format version {version} at byte offset 4")
    text = rd.take(rd.u32("header length"), "header").decode("utf-8")
    config, kv = _parse_text(text)
    count = rd.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        name = rd.take(rd.u16("name length"), f"name of tensor {i}").decode("utf-8")
        rank = rd.u8(f"rank of {name}")
        shape = tuple(rd.u32(f"extent of {name}") for _ in range(rank))
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        raw = rd.take(nbytes, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if rd.off != len(data):
        raise CheckpointError(
            f"{len(data) - rd.off} trailing bytes at byte offset {rd.off}")
    adam = None
    if "adam.t" in kv:
        adam = {"t": int(kv["adam.t"]), "beta1": float(kv["adam.beta1"]),
                "beta2": float(kv["adam.beta2"]), "eps": float(kv["adam.eps"])}
    return Checkpoint(config, tensors,
                      epoch=int(kv.get("epoch", 0)),
                      step=int(kv.get("step", 0)),
                      bn_frozen=kv.get("bn_frozen") == "true",
                      adam=adam)


def restore_network(ckpt: Checkpoint) -> Network:
    """Rebuild the network for the embedded config and install the saved
    tensors, validating every shape."""
    net = build(ckpt.config, seed=0)
    for p in net.params:
        if p.name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint missing tensor {p.name!r}")
        val = ckpt.tensors[p.name]
        if val.shape != p.value.shape:
            raise CheckpointError(
                f"tensor {p.name!r} has shape {val.shape}, "
                f"model expects {p.value.shape}")
        p.value[...] = val
    if ckpt.bn_frozen:
        net.freeze_batch_norm()
    return net
