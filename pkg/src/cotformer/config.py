from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any

VARIANTS = ("standard", "block_universal", "cotformer")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Layers are split into ``n_begin`` fixed layers, an ``n_middle`` stack that is
    applied ``n_repeat`` times with shared weights, and ``n_end`` fixed layers.
    A 2->21x5->1 model is ``n_begin=2, n_middle=21, n_repeat=5, n_end=1``.
    """

    variant: str = "cotformer"
    n_begin: int = 0
    n_middle: int = 2
    n_end: int = 0
    n_repeat: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int | None = None
    vocab_size: int = 256
    max_seq_len: int = 256
    ln_per_repeat: bool = False
    depth_embedding: bool = False
    self_history: bool = True
    adaptive: bool = False
    rope_base: float = 10000.0

    def __post_init__(self) -> None:
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len", "n_repeat"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("n_begin", "n_middle", "n_end"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.n_begin + self.n_middle + self.n_end < 1:
            raise ValueError("model needs at least one layer")
        if self.n_middle < 1 and self.n_repeat > 1:
            raise ValueError("a repeated stack needs n_middle >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary positions")
        if self.variant == "standard":
            if self.n_repeat != 1 or self.n_begin or self.n_end:
                raise ValueError("standard variant requires n_repeat=1 and no reserved layers")
            if self.adaptive or self.depth_embedding or self.ln_per_repeat:
                raise ValueError("standard variant has no repeat-level features")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_layers(self) -> int:
        return self.n_begin + self.n_middle + self.n_end

    def replace(self, **changes: Any) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def label(self) -> str:
        core = f"{self.n_middle}x{self.n_repeat}"
        if self.n_begin or self.n_end:
            core = f"{self.n_begin}->{core}->{self.n_end}"
        return f"{self.variant}:{core}"
