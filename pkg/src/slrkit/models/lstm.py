from __future__ import annotations

import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .base import PoseClassifier, frame_mask
from .config import ModelConfig


class TemporalAttention(nn.Module):
    """Additive attention pooling: alpha_t = softmax_t(v . tanh(W h_t))."""

    def __init__(self, dim: int, attention_dim: int):
        super().__init__()
        self.proj = nn.Linear(dim, attention_dim)
        self.score = nn.Linear(attention_dim, 1, bias=False)

    def forward(self, h: torch.Tensor, mask: torch.Tensor):
        scores = self.score(torch.tanh(self.proj(h))).squeeze(-1)
        scores = scores.masked_fill(~mask, float("-inf"))
        alpha = torch.softmax(scores, dim=1)
        return torch.einsum("bt,btd->bd", alpha, h), alpha


class LSTMClassifier(PoseClassifier):
    architecture = "lstm"

    def __init__(self, config: ModelConfig):
        cfg = config.lstm
        width = cfg.hidden * (2 if cfg.bidirectional else 1)
        super().__init__(config, width)
        self.lstm = nn.LSTM(
            input_size=config.num_keypoints * config.in_channels,
            hidden_size=cfg.hidden,
            num_layers=cfg.layers,
            bidirectional=cfg.bidirectional,
            batch_first=True,
        )
        self.attention = TemporalAttention(width, cfg.attention_dim)
        self.last_attention = None

    def features(self, x, lengths=None):
        lengths = self._check_input(x, lengths)
        b, f = x.shape[:2]
        seq = x.reshape(b, f, -1)
        if int(lengths.min()) == f:
            h, _ = self.lstm(seq)
        else:
            packed = pack_padded_sequence(seq, lengths.cpu(), batch_first=True, enforce_sorted=False)
            h, _ = self.lstm(packed)
            h, _ = pad_packed_sequence(h, batch_first=True, total_length=f)
        context, alpha = self.attention(h, frame_mask(lengths, f))
        self.last_attention = alpha.detach()
        return context
