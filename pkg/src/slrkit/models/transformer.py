from __future__ import annotations

import math

import torch
from torch import nn

from .base import PoseClassifier, frame_mask
from .config import ModelConfig


class MultiHeadSelfAttention(nn.Module):
    """Self-attention whose concatenated head width may differ from the model width."""

    def __init__(self, hidden: int, heads: int, head_dim: int):
        super().__init__()
        self.heads, self.head_dim = heads, head_dim
        width = heads * head_dim
        self.query = nn.Linear(hidden, width)
        self.key = nn.Linear(hidden, width)
        self.value = nn.Linear(hidden, width)
        self.out = nn.Linear(width, hidden)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor):
        b, n, _ = x.shape

        def split(t):
            return t.view(b, n, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, n, -1)
        return self.out(ctx), attn


class EncoderLayer(nn.Module):
    def __init__(self, hidden: int, heads: int, head_dim: int, ffn: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden)
        self.attn = MultiHeadSelfAttention(hidden, heads, head_dim)
        self.norm2 = nn.LayerNorm(hidden)
        self.ffn = nn.Sequential(nn.Linear(hidden, ffn), nn.GELU(), nn.Linear(ffn, hidden))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_mask):
        a, attn = self.attn(self.norm1(x), key_mask)
        x = x + self.drop(a)
        x = x + self.drop(self.ffn(self.norm2(x)))
        return x, attn


class TransformerEncoder(nn.Module):
    """Frame embedding, [CLS] prepend, learned positions and pre-norm layers."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        cfg = config.transformer
        self.max_seq = cfg.max_seq
        head_dim = cfg.head_dim or cfg.hidden // cfg.heads
        self.embed = nn.Linear(config.num_keypoints * config.in_channels, cfg.hidden)
        self.cls = nn.Parameter(torch.zeros(cfg.hidden))
        self.position = nn.Parameter(torch.zeros(cfg.max_seq, cfg.hidden))
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.hidden, cfg.heads, head_dim, cfg.ffn, config.dropout) for _ in range(cfg.layers)
        )
        self.norm = nn.LayerNorm(cfg.hidden)

    def tokens(self, x: torch.Tensor) -> torch.Tensor:
        b, f = x.shape[:2]
        return self.embed(x.reshape(b, f, -1))

    def forward(self, tokens: torch.Tensor, lengths: torch.Tensor):
        """Encode frame tokens (B, F, H); returns the full sequence with CLS at 0."""
        tokens = tokens[:, : self.max_seq - 1]
        lengths = lengths.clamp(max=self.max_seq - 1)
        b, f, _ = tokens.shape
        cls = self.cls.expand(b, 1, -1)
        h = torch.cat([cls, tokens], dim=1) + self.position[: f + 1]
        key_mask = torch.cat([torch.ones(b, 1, dtype=torch.bool), frame_mask(lengths, f)], dim=1)
        maps = []
        for layer in self.layers:
            h, attn = layer(h, key_mask)
            maps.append(attn.detach())
        return self.norm(h), maps


class TransformerClassifier(PoseClassifier):
    architecture = "transformer"

    def __init__(self, config: ModelConfig):
        super().__init__(config, config.transformer.hidden)
        self.encoder = TransformerEncoder(config)
        self.last_attention = None

    def features(self, x, lengths=None):
        lengths = self._check_input(x, lengths)
        h, maps = self.encoder(self.encoder.tokens(x), lengths)
        self.last_attention = maps
        return h[:, 0]
