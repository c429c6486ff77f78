"""Model configuration shared by the embedding and transformer layers."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace

from .errors import ConfigError

MODES = ("ESA", "DiM")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_width: int | None = None  # defaults to 4 * d_model
    mode: str = "DiM"
    d_r: int = 27
    d_g: int = 5
    d_c: int = 16
    max_positions: int = 48
    max_rois: int = 8
    dropout: float = 0.0
    tie_embeddings: bool = False
    init_std: float | None = None  # defaults to 0.02 * sqrt(768 / d_model)
    ln_eps: float = 1e-12

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.d_model <= 0 or self.d_model % 2:
            raise ConfigError("d_model must be a positive even number")
        if self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.n_layers < 0 or self.vocab_size <= 0:
            raise ConfigError("n_layers must be >= 0 and vocab_size > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return self.ffn_width or 4 * self.d_model

    @property
    def std(self) -> float:
        return self.init_std if self.init_std is not None else 0.02 * math.sqrt(768.0 / self.d_model)

    def with_mode(self, mode: str) -> "ModelConfig":
        return replace(self, mode=mode)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
