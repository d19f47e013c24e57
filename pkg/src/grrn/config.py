"""Model hyperparameters and the named presets.

The six structural knobs are: feature-extraction depth ``s``, body depth
``S``, blocks per group ``B``, group count ``G``, pointwise-conv groups
``g``, and the channel-attention reduction ``reduction_r``.  ``scale_r``
is the magnification factor and ``n`` the temporal radius (2n+1 input
frames).  ``reduction_r`` and ``scale_r`` are deliberately distinct names;
they are unrelated quantities.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    s: int
    S: int
    B: int
    G: int
    g: int
    reduction_r: int
    scale_r: int = 4
    n: int = 3
    use_channel_attention: bool = True
    use_rir: bool = True

    def __post_init__(self):
        for name in ("s", "S", "B", "G", "g", "reduction_r"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.scale_r < 2:
            raise ConfigError(f"scale_r must be >= 2, got {self.scale_r}")
        if self.S % self.g != 0:
            raise ConfigError(f"S={self.S} not divisible by g={self.g}")
        if self.S > self.reduction_r and self.S % self.reduction_r != 0:
            raise ConfigError(
                f"S={self.S} not divisible by reduction_r={self.reduction_r}"
            )

    @property
    def attention_bottleneck(self) -> int:
        """Width of the squeeze layer inside channel attention (>= 1)."""
        return max(1, self.S // self.reduction_r)

    @property
    def frames(self) -> int:
        return 2 * self.n + 1

    def replace(self, **kwargs) -> "ModelConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kwargs)
        return ModelConfig(**vals)


# Published configurations plus a desk-scale one for tests and demos.
PRESETS: dict[str, ModelConfig] = {
    "grrn-s": ModelConfig(s=12, S=192, B=20, G=4, g=3, reduction_r=32),
    "grrn": ModelConfig(s=24, S=256, B=30, G=6, g=4, reduction_r=32),
    "grrn-l": ModelConfig(s=24, S=256, B=30, G=11, g=4, reduction_r=32),
    "nano": ModelConfig(s=4, S=16, B=2, G=2, g=2, reduction_r=4, scale_r=2),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; choose from {sorted(PRESETS)}"
        ) from None
