"""Named parameter storage.

Every learnable tensor in a network lives in one ParamStore under a unique
dotted name.  Parameters are tagged by kind:

* ``trainable``  -- ordinary weights, always updated by the optimizer;
* ``batchnorm``  -- normalization gamma/beta, updated until frozen;
* ``stat``      -- moving statistics, never updated by the optimizer but
  serialized with the model.

Creation order is deterministic, which makes seeded initialization and
checkpoint layout reproducible bit for bit.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .errors import ConfigError

KINDS = ("trainable", "batchnorm", "stat")


class Parameter:
    __slots__ = ("name", "value", "grad", "kind", "frozen")

    def __init__(self, name: str, value: np.ndarray, kind: str):
        if kind not in KINDS:
            raise ConfigError(f"unknown parameter kind {kind!r}")
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.kind = kind
        self.frozen = False

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape}, kind={self.kind})"


class ParamStore:
    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray, kind: str = "trainable") -> Parameter:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(name, np.ascontiguousarray(value), kind)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def by_kind(self, kind: str) -> list[Parameter]:
        return [p for p in self._params.values() if p.kind == kind]

    def updatable(self) -> list[Parameter]:
        """Parameters the optimizer may touch: unfrozen trainable/batchnorm."""
        return [
            p for p in self._params.values()
            if p.kind in ("trainable", "batchnorm") and not p.frozen
        ]

    def count_by_kind(self) -> dict[str, int]:
        counts = {k: 0 for k in KINDS}
        for p in self._params.values():
            counts[p.kind] += p.size
        return counts

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0

    def astype(self, dtype) -> None:
        """Cast all values/grads in place (used by 64-bit gradient tests)."""
        for p in self._params.values():
            p.value = p.value.astype(dtype)
            p.grad = p.grad.astype(dtype)

    def state_bytes(self) -> bytes:
        """Raw little-endian concatenation of all values, for equality checks."""
        return b"".join(
            np.ascontiguousarray(p.value, dtype="<f4").tobytes()
            for p in self._params.values()
        )
