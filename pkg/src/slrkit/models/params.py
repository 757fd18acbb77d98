"""Parameter sets, initialization, checkpoints and the backward entry point.

Checkpoint layout (single file, little-endian):

    8 bytes   magic b"SLRKCKPT"
    4 bytes   uint32 header length N
    N bytes   UTF-8 JSON header: format_version, architecture, config_hash,
              config, tensors = [{"name", "shape"}, ...]
    rest      float32 values of each tensor in header order, C-contiguous
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..pose import SkeletonGraph
from .base import PoseClassifier
from .config import ModelConfig
from .lstm import LSTMClassifier
from .stgcn import MaskedInstanceNorm, STGCNClassifier
from .transformer import TransformerClassifier

CHECKPOINT_MAGIC = b"SLRKCKPT"
CHECKPOINT_FORMAT_VERSION = 1

ARCHITECTURES = {
    "lstm": LSTMClassifier,
    "transformer": TransformerClassifier,
    "stgcn": STGCNClassifier,
}


class CheckpointMismatch(ValueError):
    pass


def _init_module(model: nn.Module, generator: torch.Generator):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for matrices and vectors, zero biases.

    Normalization scales start at one, edge-importance masks at one.
    """
    norm_params = set()
    for module in model.modules():
        if isinstance(module, (nn.LayerNorm, MaskedInstanceNorm)):
            norm_params.add(id(module.weight))
            norm_params.add(id(module.bias))
    with torch.no_grad():
        for name, p in model.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if id(p) in norm_params:
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "importance":
                p.fill_(1.0)
            elif leaf.startswith("bias"):
                p.zero_()
            else:
                fan_in = p[0].numel() if p.dim() >= 2 else p.numel()
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_(torch.rand(p.shape, generator=generator) * 2 * bound - bound)


def build_model(config: ModelConfig, graph: SkeletonGraph | None = None) -> PoseClassifier:
    cls = ARCHITECTURES[config.variant]
    return cls(config, graph) if config.variant == "stgcn" else cls(config)


def init_parameters(config: ModelConfig, seed: int = 0, graph: SkeletonGraph | None = None) -> PoseClassifier:
    """A freshly initialized classifier; identical tensors for identical seeds."""
    model = build_model(config, graph)
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    _init_module(model, gen)
    return model


def reset_head(model: PoseClassifier, seed: int):
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    _init_module(model.head, gen)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@dataclass
class ParameterSet:
    """Named float32 tensors plus the architecture/config they belong to."""

    architecture: str
    config_hash: str
    tensors: dict[str, torch.Tensor]
    config: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: PoseClassifier, encoder_only: bool = False) -> "ParameterSet":
        named = model.encoder_parameters() if encoder_only else list(model.named_parameters())
        tensors = {n: p.detach().clone() for n, p in named}
        config = model.config
        return cls(
            model.architecture,
            config.encoder_hash if encoder_only else config.config_hash,
            tensors,
            config.to_dict(),
        )

    def save(self, path: str | Path):
        header = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "architecture": self.architecture,
            "config_hash": self.config_hash,
            "config": self.config,
            "tensors": [{"name": n, "shape": list(t.shape)} for n, t in self.tensors.items()],
        }
        blob = json.dumps(header, sort_keys=True).encode()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for t in self.tensors.values():
                fh.write(t.detach().cpu().numpy().astype("<f4", copy=False).tobytes(order="C"))
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "ParameterSet":
        raw = Path(path).read_bytes()
        if raw[:8] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<I", raw[8:12])
        header = json.loads(raw[12:12 + n])
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format_version {header.get('format_version')!r}")
        offset = 12 + n
        tensors = {}
        for entry in header["tensors"]:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            values = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            tensors[entry["name"]] = torch.from_numpy(values.astype(np.float32).reshape(entry["shape"]))
            offset += 4 * count
        if offset != len(raw):
            raise ValueError(f"{path}: trailing bytes after tensor table")
        return cls(header["architecture"], header["config_hash"], tensors, header.get("config", {}))

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config)

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, t in sorted(self.tensors.items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().astype("<f4").tobytes())
        return h.hexdigest()


def load_parameters(model: PoseClassifier, params: ParameterSet, allow_mismatch: bool = False, strict: bool = True):
    """Copy tensors into ``model``.

    A differing architecture or config hash is refused unless
    ``allow_mismatch``; with it, only name- and shape-matching tensors move.
    """
    if params.architecture != model.architecture:
        raise CheckpointMismatch(
            f"checkpoint architecture {params.architecture!r} does not match model {model.architecture!r}"
        )
    if params.config_hash != model.config_hash and not allow_mismatch:
        raise CheckpointMismatch(
            f"checkpoint config hash {params.config_hash} differs from model {model.config_hash}"
        )
    own = dict(model.named_parameters())
    copied = []
    with torch.no_grad():
        for name, value in params.tensors.items():
            target = own.get(name)
            if target is None or target.shape != value.shape:
                if strict and not allow_mismatch:
                    raise CheckpointMismatch(f"tensor {name!r} missing or mis-shaped in model")
                continue
            target.copy_(value)
            copied.append(name)
    if strict and not allow_mismatch and len(copied) != len(own):
        missing = sorted(set(own) - set(copied))
        raise CheckpointMismatch(f"checkpoint lacks tensors {missing[:3]}")
    return copied


def model_from_checkpoint(path: str | Path, graph: SkeletonGraph | None = None) -> PoseClassifier:
    params = ParameterSet.load(path)
    model = build_model(params.model_config(), graph)
    load_parameters(model, params)
    model.eval()
    return model


def backward(model: nn.Module, loss: torch.Tensor):
    """Accumulate d(loss)/d(param) into every parameter's ``.grad`` slot.

    Parameters the loss does not depend on get an exact zero gradient.
    """
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise RuntimeError("backward called without a recorded forward pass for this loss")
    if loss.numel() != 1:
        raise ValueError("loss must be a scalar")
    loss.backward()
    for p in model.parameters():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
