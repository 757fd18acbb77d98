"""Self-supervised pretraining: predictive coding, momentum contrast, masked regression."""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .corpus import Corpus, sample_pretraining_clip
from .models import ModelConfig, ParameterSet, PoseClassifier, backward, collate, init_parameters
from .pose import KeypointSelection, PoseSequence, SkeletonGraph
from .rng import RandomSource
from .train import Adam, transplant_encoder
from .transforms import compose, parse_pipeline
from .util import from_dict, prefetch, to_dict

STATIC, Q1, Q2, Q3, Q4 = range(5)
DIRECTION_NAMES = ("STATIC", "Q1", "Q2", "Q3", "Q4")
STATIC_THRESHOLD = 1e-3


@dataclass
class DpcConfig:
    window_len: int = 10
    input_windows: int = 4
    predict_windows: int = 3
    # 0 means the encoder's embedding width
    embedding_dim: int = 0
    gru_hidden: int = 0
    # drawn independently for every window, so a clip-wide viewpoint cannot identify its own future
    window_augmentations: list = field(default_factory=list)

    def __post_init__(self):
        if min(self.window_len, self.input_windows, self.predict_windows) < 1:
            raise ValueError("window_len, input_windows and predict_windows must be >= 1")
        if self.embedding_dim < 0 or self.gru_hidden < 0:
            raise ValueError("embedding_dim and gru_hidden must be >= 0")
        self.window_augmentations = [s.to_dict() for s in parse_pipeline(self.window_augmentations)]

    @property
    def total_windows(self) -> int:
        return self.input_windows + self.predict_windows


@dataclass
class MocoConfig:
    temperature: float = 0.07
    momentum: float = 0.999
    bank_capacity: int = 4096
    augmentations: list = field(default_factory=lambda: [
        {"name": "shear"}, {"name": "scale"}, {"name": "rotate"},
    ])

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0 <= self.momentum <= 1:
            raise ValueError("momentum must be in [0, 1]")
        if self.bank_capacity < 1:
            raise ValueError("bank_capacity must be >= 1")
        self.augmentations = [s.to_dict() for s in parse_pipeline(self.augmentations)]


@dataclass
class MaskConfig:
    mask_ratio: float = 0.4
    span_mode: str = "single"
    loss_mode: str = "regression"
    min_span: int = 2
    max_span: int = 10

    def __post_init__(self):
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must lie strictly between 0 and 1")
        if self.span_mode not in ("single", "span"):
            raise ValueError("span_mode must be 'single' or 'span'")
        if self.loss_mode not in ("regression", "regression+direction"):
            raise ValueError("loss_mode must be 'regression' or 'regression+direction'")
        if not 1 <= self.min_span <= self.max_span:
            raise ValueError("need 1 <= min_span <= max_span")


@dataclass
class PretrainConfig:
    """Optimizer and sampling settings shared by the three strategies."""

    model: ModelConfig
    batch_size: int = 128
    learning_rate: float = 1e-3
    steps: int = 1000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    min_clip_len: int = 60
    max_clip_len: int = 120
    # applied to every sampled clip before the strategy sees it
    transforms: list = field(default_factory=list)

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 1 <= self.min_clip_len <= self.max_clip_len:
            raise ValueError("need 1 <= min_clip_len <= max_clip_len")
        self.transforms = [s.to_dict() for s in parse_pipeline(self.transforms)]

    @classmethod
    def from_dict(cls, data) -> "PretrainConfig":
        return from_dict(cls, data, "pretrain")

    def to_dict(self) -> dict:
        return to_dict(self)


@dataclass
class PretrainResult:
    encoder: ParameterSet
    history: list[dict]
    # the full pretraining network (encoder plus strategy heads), for inspection
    model: nn.Module | None = None


# ---------------------------------------------------------------- objectives


def infonce_loss(predicted, actual, negatives=None, in_batch: bool = False,
                 temperature: float = 1.0, reduction: str = "sum") -> torch.Tensor:
    """-sum_i log softmax over j of (p_i . z_j / temperature), positive j = i.

    Row i's candidates are its own positive ``actual[i]``, every row of
    ``negatives`` and, with ``in_batch``, every other ``actual`` row.
    Computed in float64 with a max-subtracted log-sum-exp.
    """
    p = torch.as_tensor(np.asarray(predicted) if isinstance(predicted, list) else predicted).double()
    z = torch.as_tensor(np.asarray(actual) if isinstance(actual, list) else actual).double()
    p, z = p.reshape(-1, p.shape[-1]), z.reshape(-1, z.shape[-1])
    if p.shape != z.shape:
        raise ValueError(f"predicted {tuple(p.shape)} and actual {tuple(z.shape)} embeddings do not align")
    columns = [(p * z).sum(1, keepdim=True)]
    if in_batch:
        cross = p @ z.T
        off = ~torch.eye(len(p), dtype=torch.bool)
        columns.append(cross[off].reshape(len(p), len(p) - 1))
    if negatives is not None and len(negatives):
        n = torch.as_tensor(np.asarray(negatives) if isinstance(negatives, list) else negatives).double()
        n = n.reshape(-1, n.shape[-1])
        if n.shape[1] != p.shape[1]:
            raise ValueError(f"negatives have dimension {n.shape[1]}, embeddings {p.shape[1]}")
        columns.append(p @ n.T)
    logits = torch.cat(columns, dim=1) / temperature
    # lse - positive = (max - positive) + log1p(sum of the non-max terms), accurate when one score dominates
    top, where = logits.max(dim=1, keepdim=True)
    rest = torch.exp(logits - top).scatter(1, where, 0.0).sum(dim=1)
    per_row = (top[:, 0] - logits[:, 0]) + torch.log1p(rest)
    if reduction == "sum":
        return per_row.sum()
    if reduction == "mean":
        return per_row.mean()
    raise ValueError("reduction must be 'sum' or 'mean'")


class MemoryBank:
    """Fixed-capacity FIFO queue of embeddings; the oldest entries are evicted first."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("memory bank capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self._data = torch.zeros(capacity, dim)
        self._start = 0
        self.size = 0

    def __len__(self):
        return self.size

    def enqueue(self, batch: torch.Tensor):
        batch = batch.detach().reshape(-1, self.dim)
        if len(batch) > self.capacity:
            batch = batch[-self.capacity:]
        for row in batch:
            end = (self._start + self.size) % self.capacity
            self._data[end] = row
            if self.size == self.capacity:
                self._start = (self._start + 1) % self.capacity
            else:
                self.size += 1

    def entries(self) -> torch.Tensor:
        """Contents from oldest to newest."""
        idx = (self._start + torch.arange(self.size)) % self.capacity
        return self._data[idx].clone()


def direction_labels(pose: PoseSequence, threshold: float = STATIC_THRESHOLD) -> np.ndarray:
    """Per-frame, per-keypoint motion class in {STATIC, Q1..Q4}.

    Motion is frame_t - frame_(t-1); x points right and y down, so Q1 is
    up-right on screen and the quadrants go counter-clockwise from there.
    The first frame, slow keypoints and keypoints missing in either frame
    are STATIC.
    """
    if pose.num_frames < 2:
        raise ValueError("direction labels need at least 2 frames")
    data = pose.data.astype(np.float64)
    v = np.diff(data, axis=0)
    u, w = v[..., 0], -v[..., 1]
    labels = np.select(
        [(u > 0) & (w >= 0), (u <= 0) & (w > 0), (u < 0) & (w <= 0), (u >= 0) & (w < 0)],
        [Q1, Q2, Q3, Q4], STATIC,
    )
    still = np.linalg.norm(v, axis=-1) <= threshold
    both = pose.valid[1:] & pose.valid[:-1]
    labels[still | ~both] = STATIC
    return np.concatenate([np.full((1, pose.num_keypoints), STATIC), labels]).astype(np.int64)


def static_fraction(poses) -> float:
    labels = np.concatenate([direction_labels(p)[1:].reshape(-1) for p in poses])
    return float(np.mean(labels == STATIC))


# ---------------------------------------------------------------- shared plumbing


def partition_windows(pose: PoseSequence, window_len: int) -> list[PoseSequence]:
    """Consecutive non-overlapping windows; trailing frames that do not fill one are dropped."""
    if window_len < 1:
        raise ValueError("window_len must be >= 1")
    count = pose.num_frames // window_len
    if count == 0:
        raise ValueError(f"clip of {pose.num_frames} frames is shorter than one {window_len}-frame window")
    return [pose.frames(slice(i * window_len, (i + 1) * window_len)) for i in range(count)]


def _encoder_model(config: PretrainConfig, rng: RandomSource, graph) -> PoseClassifier:
    return init_parameters(config.model, rng.child("init").torch_seed(), graph)


def _clip_batches(corpus: Corpus, config: PretrainConfig, rng: RandomSource, min_len: int, ids=None,
                  selection: KeypointSelection | None = None):
    if len(corpus) == 0:
        raise ValueError("pretraining corpus is empty")
    lo = max(config.min_clip_len, min_len)
    hi = max(config.max_clip_len, lo)
    for step in range(1, config.steps + 1):
        step_rng = rng.child(f"step:{step}")
        clips = []
        for b in range(config.batch_size):
            clip = sample_pretraining_clip(corpus, step_rng, lo, hi, ids)
            if config.transforms:
                clip = compose(config.transforms, clip, step_rng.child(f"t:{b}"), selection)
            clips.append(clip)
        yield step, step_rng, clips


def _optimizer(params, config: PretrainConfig) -> Adam:
    return Adam(params, config.learning_rate, (config.beta1, config.beta2), config.adam_eps)


class _Log:
    def __init__(self, path):
        self.history = []
        self.sink = open(path, "w") if path else None
        self.started = time.monotonic()

    def __call__(self, step, loss, lr, **extra):
        entry = {"step": step, "loss": loss, "lr": lr, "wall_time_s": time.monotonic() - self.started, **extra}
        self.history.append(entry)
        if self.sink:
            self.sink.write(json.dumps(entry) + "\n")
            self.sink.flush()

    def close(self):
        if self.sink:
            self.sink.close()


def _check_finite(loss: torch.Tensor, step: int, what: str):
    if not torch.isfinite(loss):
        raise FloatingPointError(f"{what} loss became {loss.item()} at step {step}")


# ---------------------------------------------------------------- dense predictive coding


class DpcModel(nn.Module):
    """Window encoder, GRU aggregator and the affine prediction map."""

    def __init__(self, encoder: PoseClassifier, config: DpcConfig):
        super().__init__()
        self.encoder = encoder
        self.config = config
        width = encoder.head.in_features
        if config.embedding_dim and config.embedding_dim != width:
            raise ValueError(f"embedding_dim {config.embedding_dim} differs from the encoder width {width}")
        hidden = config.gru_hidden or width
        self.gru = nn.GRUCell(width, hidden)
        self.phi = nn.Linear(hidden, width)

    @property
    def embedding_dim(self) -> int:
        return self.phi.out_features

    def embed(self, windows: torch.Tensor) -> torch.Tensor:
        """(B, W, L, K, C) windows -> (B, W, D) embeddings."""
        b, w = windows.shape[:2]
        flat = windows.reshape(b * w, *windows.shape[2:])
        return self.encoder.features(flat).reshape(b, w, -1)

    def forward(self, windows: torch.Tensor):
        cfg = self.config
        if windows.shape[1] < cfg.total_windows:
            raise ValueError(
                f"{windows.shape[1]} windows, need {cfg.input_windows} input + {cfg.predict_windows} predicted"
            )
        z = self.embed(windows[:, : cfg.total_windows])
        h = torch.zeros(z.shape[0], self.gru.hidden_size, dtype=z.dtype)
        for i in range(cfg.input_windows):
            h = self.gru(z[:, i], h)
        predicted = []
        for p in range(cfg.predict_windows):
            guess = self.phi(h)
            predicted.append(guess)
            if p + 1 < cfg.predict_windows:
                h = self.gru(guess, h)
        return torch.stack(predicted, dim=1), z[:, cfg.input_windows:]


def stack_windows(clips: list[PoseSequence], config: DpcConfig, rng: RandomSource | None = None,
                  selection: KeypointSelection | None = None) -> torch.Tensor:
    """The first input+predict windows of every clip as a (B, W, L, K, C) tensor.

    With ``rng``, each window gets its own draw of ``config.window_augmentations``.
    """
    out = []
    for b, clip in enumerate(clips):
        windows = partition_windows(clip, config.window_len)
        if len(windows) < config.total_windows:
            raise ValueError(
                f"clip of {clip.num_frames} frames gives {len(windows)} windows, need {config.total_windows}"
            )
        windows = windows[: config.total_windows]
        if rng is not None and config.window_augmentations:
            windows = [compose(config.window_augmentations, w, rng.child(f"w:{b}:{i}"), selection)
                       for i, w in enumerate(windows)]
        out.append(np.stack([w.data for w in windows]))
    return torch.from_numpy(np.stack(out))


def dpc_forward(model: DpcModel, windows) -> tuple[torch.Tensor, torch.Tensor]:
    """Predicted and actual future-window embeddings, each (B, P, D).

    ``windows`` is a (B, W, L, K, C) tensor or a list of clips to partition.
    """
    if isinstance(windows, list):
        windows = stack_windows(windows, model.config)
    return model(windows)


def dpc_loss(predicted: torch.Tensor, actual: torch.Tensor) -> torch.Tensor:
    """Mean per-prediction InfoNCE; every other (sample, step) embedding in the batch is a negative."""
    d = predicted.shape[-1]
    return infonce_loss(predicted.reshape(-1, d), actual.reshape(-1, d), in_batch=True, reduction="mean")


def dpc_pretrain(corpus: Corpus, dpc: DpcConfig, config: PretrainConfig, graph: SkeletonGraph | None = None,
                 ids=None, log_path=None, selection: KeypointSelection | None = None) -> PretrainResult:
    rng = RandomSource(config.seed)
    torch.manual_seed(rng.child("torch").torch_seed())
    encoder = _encoder_model(config, rng, graph)
    model = DpcModel(encoder, dpc)
    gen = torch.Generator().manual_seed(rng.child("dpc-heads").torch_seed())
    with torch.no_grad():
        for module in (model.gru, model.phi):
            for name, p in module.named_parameters():
                bound = 1.0 / math.sqrt(p.shape[-1])
                p.copy_(torch.zeros_like(p) if "bias" in name else (torch.rand(p.shape, generator=gen) * 2 - 1) * bound)
    params = [p for n, p in model.named_parameters() if not n.startswith("encoder.head.")]
    opt = _optimizer(params, config)
    log = _Log(log_path)
    need = dpc.total_windows * dpc.window_len
    try:
        model.train()
        for step, step_rng, clips in prefetch(_clip_batches(corpus, config, rng, need, ids, selection)):
            predicted, actual = model(stack_windows(clips, dpc, step_rng.child("windows"), selection))
            loss = dpc_loss(predicted, actual)
            _check_finite(loss, step, "predictive-coding")
            opt.zero_grad()
            backward(model, loss)
            opt.step()
            log(step, loss.item(), opt.lr)
    finally:
        log.close()
    model.eval()
    return PretrainResult(ParameterSet.from_model(encoder, encoder_only=True), log.history, model)


# ---------------------------------------------------------------- momentum contrast


def _normalized(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=1, keepdim=True).clamp_min(1e-12)


@torch.no_grad()
def momentum_update(key_model: nn.Module, query_model: nn.Module, momentum: float):
    for k, q in zip(key_model.parameters(), query_model.parameters()):
        k.mul_(momentum).add_(q.detach(), alpha=1 - momentum)


def moco_loss(query: torch.Tensor, key: torch.Tensor, bank: MemoryBank, temperature: float) -> torch.Tensor:
    q, k = _normalized(query), _normalized(key.detach())
    negatives = bank.entries() if len(bank) else None
    return infonce_loss(q, k, negatives, temperature=temperature, reduction="mean")


def moco_pretrain(corpus: Corpus, moco: MocoConfig, config: PretrainConfig, graph: SkeletonGraph | None = None,
                  ids=None, log_path=None, selection: KeypointSelection | None = None) -> PretrainResult:
    if moco.bank_capacity < config.batch_size:
        raise ValueError(f"memory bank capacity {moco.bank_capacity} is below the batch size {config.batch_size}")
    rng = RandomSource(config.seed)
    torch.manual_seed(rng.child("torch").torch_seed())
    query_model = _encoder_model(config, rng, graph)
    key_model = copy.deepcopy(query_model)
    for p in key_model.parameters():
        p.requires_grad_(False)
    bank = MemoryBank(moco.bank_capacity, query_model.head.in_features)
    params = [p for n, p in query_model.named_parameters() if not n.startswith("head.")]
    opt = _optimizer(params, config)
    log = _Log(log_path)
    try:
        query_model.train()
        key_model.train()
        for step, step_rng, clips in prefetch(_clip_batches(corpus, config, rng, 1, ids, selection)):
            views = [
                [compose(moco.augmentations, c, step_rng.child(f"view{v}:{i}"), selection) for i, c in enumerate(clips)]
                for v in (0, 1)
            ]
            xq, lq = collate(views[0])
            xk, lk = collate(views[1])
            query = query_model.features(xq, lq)
            with torch.no_grad():
                key = key_model.features(xk, lk)
            loss = moco_loss(query, key, bank, moco.temperature)
            _check_finite(loss, step, "contrastive")
            opt.zero_grad()
            backward(query_model, loss)
            opt.step()
            momentum_update(key_model, query_model, moco.momentum)
            bank.enqueue(_normalized(key))
            log(step, loss.item(), opt.lr, bank_size=len(bank))
    finally:
        log.close()
    query_model.eval()
    return PretrainResult(ParameterSet.from_model(query_model, encoder_only=True), log.history)


# ---------------------------------------------------------------- masked regression


def frame_mask_indices(num_frames: int, config: MaskConfig, rng: RandomSource) -> np.ndarray:
    """Boolean mask with exactly round(ratio * F) frames set (at least one)."""
    target = min(num_frames, max(1, int(round(config.mask_ratio * num_frames))))
    mask = np.zeros(num_frames, dtype=bool)
    if config.span_mode == "single":
        mask[rng.choice(num_frames, target)] = True
        return mask
    while mask.sum() < target:
        length = rng.integer(config.min_span, config.max_span)
        start = rng.integer(0, max(0, num_frames - length))
        free = np.flatnonzero(~mask[start:start + length]) + start
        mask[free[: target - int(mask.sum())]] = True
    return mask


class MaskedModel(nn.Module):
    """Transformer encoder with a learned mask frame and per-frame prediction heads."""

    def __init__(self, encoder: PoseClassifier, with_direction: bool):
        super().__init__()
        if encoder.architecture != "transformer":
            raise ValueError("masked pretraining uses the transformer encoder")
        self.encoder = encoder
        cfg = encoder.config
        frame_dim = cfg.num_keypoints * cfg.in_channels
        hidden = cfg.transformer.hidden
        self.mask_frame = nn.Parameter(torch.zeros(frame_dim))
        self.regress = nn.Linear(hidden, frame_dim)
        self.direction = nn.Linear(hidden, cfg.num_keypoints * 5) if with_direction else None

    def forward(self, x: torch.Tensor, lengths: torch.Tensor, mask: torch.Tensor):
        b, f = x.shape[:2]
        flat = x.reshape(b, f, -1)
        flat = torch.where(mask[..., None], self.mask_frame.expand_as(flat), flat)
        inner = self.encoder.encoder
        h, _ = inner(inner.embed(flat), lengths)
        h = h[:, 1:]
        coords = self.regress(h)
        directions = self.direction(h).reshape(b, h.shape[1], -1, 5) if self.direction is not None else None
        return coords, directions


def masked_loss(model: MaskedModel, clips: list[PoseSequence], masks: list[np.ndarray]):
    max_frames = model.encoder.config.transformer.max_seq - 1
    clips = [c.frames(slice(0, max_frames)) for c in clips]
    masks = [m[:max_frames] for m in masks]
    x, lengths = collate(clips)
    m = torch.zeros(x.shape[:2], dtype=torch.bool)
    for i, mk in enumerate(masks):
        m[i, : len(mk)] = torch.from_numpy(mk)
    coords, directions = model(x, lengths, m)
    target = x.reshape(x.shape[0], x.shape[1], -1)
    sel = m[:, : coords.shape[1]]
    regression = ((coords[sel].double() - target[:, : coords.shape[1]][sel].double()) ** 2).mean()
    if directions is None:
        return regression, regression.item(), 0.0
    labels = torch.zeros(x.shape[:3], dtype=torch.long)
    for i, clip in enumerate(clips):
        labels[i, : clip.num_frames] = torch.from_numpy(direction_labels(clip)) if clip.num_frames > 1 else 0
    logits = directions[sel].reshape(-1, 5).double()
    chosen = labels[:, : coords.shape[1]][sel].reshape(-1)
    # lse = max + log1p(sum of the other terms): stays accurate when one score dominates
    top, where = logits.max(dim=1, keepdim=True)
    rest = torch.exp(logits - top).scatter(1, where, 0.0).sum(dim=1)
    lse = top[:, 0] + torch.log1p(rest)
    direction = (lse - logits.gather(1, chosen[:, None])[:, 0]).mean()
    return regression + direction, regression.item(), direction.item()


def masked_pretrain(corpus: Corpus, mask: MaskConfig, config: PretrainConfig, ids=None, log_path=None,
                    selection: KeypointSelection | None = None) -> PretrainResult:
    rng = RandomSource(config.seed)
    torch.manual_seed(rng.child("torch").torch_seed())
    encoder = _encoder_model(config, rng, None)
    model = MaskedModel(encoder, mask.loss_mode == "regression+direction")
    gen = torch.Generator().manual_seed(rng.child("mask-heads").torch_seed())
    with torch.no_grad():
        for head in (model.regress, model.direction):
            if head is not None:
                bound = 1.0 / math.sqrt(head.in_features)
                head.weight.copy_((torch.rand(head.weight.shape, generator=gen) * 2 - 1) * bound)
                head.bias.zero_()
    params = [p for n, p in model.named_parameters() if not n.startswith("encoder.head.")]
    opt = _optimizer(params, config)
    log = _Log(log_path)
    try:
        model.train()
        for step, step_rng, clips in prefetch(_clip_batches(corpus, config, rng, 1, ids, selection)):
            masks = [frame_mask_indices(c.num_frames, mask, step_rng.child(f"mask:{i}")) for i, c in enumerate(clips)]
            loss, regression, direction = masked_loss(model, clips, masks)
            _check_finite(loss, step, "masked-regression")
            opt.zero_grad()
            backward(model, loss)
            opt.step()
            log(step, loss.item(), opt.lr, regression=regression, direction=direction)
    finally:
        log.close()
    encoder.eval()
    return PretrainResult(ParameterSet.from_model(encoder, encoder_only=True), log.history)


def transplant(pretrained: ParameterSet, target: ModelConfig, seed: int = 0,
               graph: SkeletonGraph | None = None, allow_mismatch: bool = False) -> ParameterSet:
    """A full classifier parameter set: pretrained encoder plus a fresh head for ``target``."""
    model = init_parameters(target, seed, graph)
    transplant_encoder(model, pretrained, RandomSource(seed).child("head").torch_seed(), allow_mismatch)
    return ParameterSet.from_model(model)


def save_history(history: list[dict], path: str | Path):
    with open(path, "w") as fh:
        for entry in history:
            fh.write(json.dumps(entry) + "\n")
