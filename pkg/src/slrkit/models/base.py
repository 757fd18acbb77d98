from __future__ import annotations

import numpy as np
import torch
from torch import nn

from ..pose import PoseSequence
from .config import ModelConfig


def collate(poses: list[PoseSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero-pad clips to the longest one: (B, F_max, K, 2) plus true lengths."""
    if not poses:
        raise ValueError("cannot collate an empty batch")
    lengths = [p.num_frames for p in poses]
    k = poses[0].num_keypoints
    out = np.zeros((len(poses), max(lengths), k, 2), dtype=np.float32)
    for i, p in enumerate(poses):
        if p.num_keypoints != k:
            raise ValueError("all clips in a batch need the same keypoint count")
        out[i, : p.num_frames] = p.data
    return torch.from_numpy(out), torch.tensor(lengths, dtype=torch.long)


def frame_mask(lengths: torch.Tensor, frames: int) -> torch.Tensor:
    return torch.arange(frames, device=lengths.device)[None, :] < lengths[:, None]


class PoseClassifier(nn.Module):
    """Encoder producing a pooled clip feature, followed by a linear head."""

    architecture = ""

    def __init__(self, config: ModelConfig, feature_dim: int):
        super().__init__()
        self.config = config
        self.dropout = nn.Dropout(config.dropout)
        self.head = nn.Linear(feature_dim, config.num_classes)

    def _check_input(self, x: torch.Tensor, lengths):
        if x.dim() != 4 or x.shape[-1] != self.config.in_channels:
            raise ValueError(f"expected input of shape (B, F, K, {self.config.in_channels}), got {tuple(x.shape)}")
        if x.shape[1] == 0:
            raise ValueError("clip has no frames")
        if x.shape[2] != self.config.num_keypoints:
            raise ValueError(
                f"input has {x.shape[2]} keypoints, model expects {self.config.num_keypoints}"
            )
        if lengths is None:
            lengths = torch.full((x.shape[0],), x.shape[1], dtype=torch.long)
        if int(lengths.min()) < 1:
            raise ValueError("clip has no frames")
        return lengths

    def features(self, x: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        return self.head(self.dropout(self.features(x, lengths)))

    def classify(self, pose: PoseSequence) -> torch.Tensor:
        """Logits for a single clip."""
        x, lengths = collate([pose])
        return self(x, lengths)[0]

    @property
    def config_hash(self) -> str:
        return self.config.config_hash

    def encoder_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("head.")]
