from __future__ import annotations

import torch
from torch import nn

from ..pose import SkeletonGraph, default_graph
from .base import PoseClassifier, frame_mask
from .config import ModelConfig


class MaskedInstanceNorm(nn.Module):
    """Per-sample, per-channel normalization over valid (frame, node) positions."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor, mask: torch.Tensor):
        # x: (B, C, T, V); mask: (B, T)
        m = mask[:, None, :, None].to(x.dtype)
        count = m.sum(dim=(2, 3), keepdim=True) * x.shape[3]
        mean = (x * m).sum(dim=(2, 3), keepdim=True) / count
        var = (((x - mean) * m) ** 2).sum(dim=(2, 3), keepdim=True) / count
        y = (x - mean) / torch.sqrt(var + self.eps)
        return (y * self.weight[:, None, None] + self.bias[:, None, None]) * m


class STGCNBlock(nn.Module):
    """Spatial graph convolution (A * importance) f W, then a temporal convolution, plus residual."""

    def __init__(self, c_in: int, c_out: int, num_nodes: int, kernel: int, stride: int, dropout: float):
        super().__init__()
        self.stride = stride
        self.importance = nn.Parameter(torch.ones(num_nodes, num_nodes))
        self.spatial = nn.Conv2d(c_in, c_out, kernel_size=1)
        self.norm1 = MaskedInstanceNorm(c_out)
        self.temporal = nn.Conv2d(c_out, c_out, (kernel, 1), (stride, 1), ((kernel - 1) // 2, 0))
        self.norm2 = MaskedInstanceNorm(c_out)
        self.drop = nn.Dropout(dropout)
        self.act1 = nn.ReLU()
        self.act2 = nn.ReLU()
        if c_in == c_out and stride == 1:
            self.residual = None
        else:
            self.residual = nn.Conv2d(c_in, c_out, kernel_size=1, stride=(stride, 1))
            self.residual_norm = MaskedInstanceNorm(c_out)

    def forward(self, x, adjacency, mask):
        a = adjacency.to(x.dtype) * self.importance
        y = torch.einsum("bctj,ij->bcti", x, a)
        y = self.act1(self.norm1(self.spatial(y), mask))
        y = self.temporal(y)
        out_mask = mask[:, :: self.stride]
        y = self.drop(self.norm2(y, out_mask))
        res = x if self.residual is None else self.residual_norm(self.residual(x), out_mask)
        return self.act2(y + res) * out_mask[:, None, :, None].to(y.dtype), out_mask


class STGCNEncoder(nn.Module):
    def __init__(self, config: ModelConfig, graph: SkeletonGraph | None = None):
        super().__init__()
        cfg = config.stgcn
        graph = graph or default_graph()
        if graph.node_count != config.num_keypoints:
            raise ValueError(
                f"graph has {graph.node_count} nodes, model expects {config.num_keypoints} keypoints"
            )
        self.register_buffer("adjacency", torch.from_numpy(graph.adjacency_normalized.copy()))
        widths = (config.in_channels,) + tuple(cfg.channels)
        self.blocks = nn.ModuleList(
            STGCNBlock(widths[i], widths[i + 1], config.num_keypoints, cfg.temporal_kernel, cfg.strides[i],
                       config.dropout)
            for i in range(len(cfg.channels))
        )

    def forward(self, x, lengths, adjacency=None):
        """Pooled embedding of (B, F, K, C) input over valid frames and all nodes."""
        adjacency = self.adjacency if adjacency is None else adjacency
        h = x.permute(0, 3, 1, 2)
        mask = frame_mask(lengths, x.shape[1])
        for block in self.blocks:
            h, mask = block(h, adjacency, mask)
        m = mask[:, None, :, None].to(h.dtype)
        return (h * m).sum(dim=(2, 3)) / (m.sum(dim=(2, 3)) * h.shape[3])


class STGCNClassifier(PoseClassifier):
    architecture = "stgcn"

    def __init__(self, config: ModelConfig, graph: SkeletonGraph | None = None):
        super().__init__(config, config.stgcn.embedding_dim)
        self.encoder = STGCNEncoder(config, graph)

    def features(self, x, lengths=None, graph: SkeletonGraph | None = None):
        lengths = self._check_input(x, lengths)
        adjacency = None
        if graph is not None:
            if graph.node_count != x.shape[2]:
                raise ValueError(f"graph has {graph.node_count} nodes but input has {x.shape[2]} keypoints")
            adjacency = torch.from_numpy(graph.adjacency_normalized.copy())
        return self.encoder(x, lengths, adjacency)

    def forward(self, x, lengths=None, graph: SkeletonGraph | None = None):
        return self.head(self.dropout(self.features(x, lengths, graph)))
