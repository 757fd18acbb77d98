from __future__ import annotations

from dataclasses import dataclass, field

from ..util import from_dict, stable_hash, to_dict

VARIANTS = ("lstm", "transformer", "stgcn")


@dataclass
class LSTMConfig:
    layers: int = 4
    hidden: int = 128
    bidirectional: bool = True
    attention_dim: int = 128


@dataclass
class TransformerConfig:
    layers: int = 5
    heads: int = 6
    hidden: int = 128
    # 0 means hidden // heads (21 for the default 128 / 6)
    head_dim: int = 0
    # BERT default intermediate size
    ffn: int = 3072
    max_seq: int = 256

    @property
    def attention_width(self) -> int:
        return self.heads * (self.head_dim or self.hidden // self.heads)


@dataclass
class STGCNConfig:
    channels: tuple[int, ...] = (64, 64, 64, 64, 128, 128, 128, 256, 256, 256)
    strides: tuple[int, ...] = (1, 1, 1, 1, 2, 1, 1, 2, 1, 1)
    temporal_kernel: int = 9

    def __post_init__(self):
        if len(self.channels) != len(self.strides):
            raise ValueError("stgcn channels and strides must have one entry per block")
        if self.temporal_kernel % 2 == 0:
            raise ValueError("temporal_kernel must be odd")

    @property
    def embedding_dim(self) -> int:
        return self.channels[-1]


@dataclass
class ModelConfig:
    variant: str
    num_classes: int
    num_keypoints: int = 27
    in_channels: int = 2
    dropout: float = 0.0
    lstm: LSTMConfig = field(default_factory=LSTMConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    stgcn: STGCNConfig = field(default_factory=STGCNConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}; expected one of {VARIANTS}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        positives = {
            "lstm": [self.lstm.layers, self.lstm.hidden, self.lstm.attention_dim],
            "transformer": [self.transformer.layers, self.transformer.heads, self.transformer.hidden,
                            self.transformer.ffn, self.transformer.max_seq - 1],
            "stgcn": list(self.stgcn.channels) + list(self.stgcn.strides) + [len(self.stgcn.channels)],
        }[self.variant]
        if min(positives + [self.num_keypoints, self.in_channels]) < 1:
            raise ValueError(f"{self.variant} hyperparameters must be positive")

    @classmethod
    def from_dict(cls, data) -> "ModelConfig":
        return from_dict(cls, data, "model")

    def to_dict(self) -> dict:
        return to_dict(self)

    def encoder_dict(self) -> dict:
        """Fields that shape the encoder, i.e. everything but the head size."""
        return {
            "variant": self.variant,
            "num_keypoints": self.num_keypoints,
            "in_channels": self.in_channels,
            self.variant: to_dict(getattr(self, self.variant)),
        }

    @property
    def config_hash(self) -> str:
        return stable_hash({**self.encoder_dict(), "num_classes": self.num_classes})

    @property
    def encoder_hash(self) -> str:
        return stable_hash(self.encoder_dict())


def toy_config(variant: str, num_classes: int = 3, num_keypoints: int = 5, hidden: int = 8, depth: int = 2) -> ModelConfig:
    """Small configuration used by gradient checks and quick tests."""
    return ModelConfig(
        variant=variant,
        num_classes=num_classes,
        num_keypoints=num_keypoints,
        lstm=LSTMConfig(layers=depth, hidden=hidden, attention_dim=hidden),
        transformer=TransformerConfig(layers=depth, heads=2, hidden=hidden, ffn=2 * hidden, max_seq=32),
        stgcn=STGCNConfig(channels=(hidden,) * depth, strides=(1,) * (depth - 1) + (2,), temporal_kernel=3),
    )
