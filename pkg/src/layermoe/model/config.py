"""Model hyperparameters shared by the dense backbone and its MoE upcycles."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from ..errors import ConfigurationError


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the toy decoder-only transformer.

    ``top_k`` is the number of experts mixed per token per layer; it is
    clipped to the layer's expert count at forward time.
    """

    layers: int
    hidden: int
    heads: int
    vocab: int
    ffn: int
    context: int
    top_k: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigurationError("layers must be >= 1")
        if self.heads < 1 or self.hidden % self.heads != 0:
            raise ConfigurationError("hidden must be divisible by heads")
        if self.top_k < 1:
            raise ConfigurationError("top_k must be >= 1")
        if min(self.vocab, self.ffn, self.context) < 1:
            raise ConfigurationError("vocab, ffn and context must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)
