"""Supervised training: Adam, softmax cross-entropy, top-k evaluation."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corpus import Corpus
from .models import (
    ModelConfig,
    ParameterSet,
    PoseClassifier,
    backward,
    collate,
    init_parameters,
    load_parameters,
    reset_head,
)
from .models.params import CheckpointMismatch
from .pose import KeypointSelection, PoseSequence, SkeletonGraph
from .rng import RandomSource
from .transforms import compose, parse_pipeline
from .util import from_dict, to_dict

# batch size and learning rate used for each architecture
ARCHITECTURE_DEFAULTS = {
    "lstm": (32, 0.005),
    "transformer": (64, 1e-4),
    "stgcn": (32, 1e-3),
}


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig
    batch_size: int = 32
    learning_rate: float = 1e-3
    max_epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 50
    # multiply the learning rate by lr_decay every lr_decay_every epochs (0 = constant)
    lr_decay_every: int = 0
    lr_decay: float = 1.0
    train_transforms: list = field(default_factory=list)
    eval_transforms: list = field(default_factory=list)
    topk: tuple[int, ...] = (5,)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be > 0")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")
        if any(k < 1 for k in self.topk):
            raise ValueError("top-k values must be >= 1")
        self.train_transforms = [s.to_dict() for s in parse_pipeline(self.train_transforms)]
        self.eval_transforms = [s.to_dict() for s in parse_pipeline(self.eval_transforms)]

    @classmethod
    def for_architecture(cls, model: ModelConfig, **overrides) -> "TrainConfig":
        batch_size, lr = ARCHITECTURE_DEFAULTS[model.variant]
        return cls(model=model, **{"batch_size": batch_size, "learning_rate": lr, **overrides})

    @classmethod
    def from_dict(cls, data) -> "TrainConfig":
        return from_dict(cls, data, "train")

    def to_dict(self) -> dict:
        return to_dict(self)


class Adam:
    """Adam with bias correction; moment buffers live as long as the optimizer."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self):
        if not self.params or all(p.grad is None for p in self.params):
            raise RuntimeError("Adam step with no gradients; run backward first")
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            p.sub_(self.lr * (m / c1) / (torch.sqrt(v / c2) + self.eps))


def adam_step(optimizer: Adam, lr: float | None = None):
    if lr is not None:
        optimizer.lr = lr
    optimizer.step()


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean -log softmax(logits)[label] in float64, max-subtracted."""
    single = logits.dim() == 1
    z = logits.double().reshape(1, -1) if single else logits.double()
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if labels.shape[0] != z.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {z.shape[0]} rows of logits")
    if labels.numel() and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ValueError(f"label out of range for {z.shape[1]} classes")
    z = z - z.max(dim=1, keepdim=True).values.detach()
    log_norm = torch.log(torch.exp(z).sum(dim=1))
    return (log_norm - z.gather(1, labels[:, None])[:, 0]).mean()


@dataclass
class Metrics:
    top1: float
    topk: dict[int, float]
    loss: float
    per_class: dict[int, float]
    count: int

    def to_dict(self) -> dict:
        return {
            "top1": self.top1,
            "topk": {str(k): v for k, v in self.topk.items()},
            "loss": self.loss,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "count": self.count,
        }


def prediction_ranks(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """0-based rank of the true class; ties go to the lower class index."""
    logits = np.asarray(logits, dtype=np.float64)
    truth = logits[np.arange(len(labels)), labels][:, None]
    cols = np.arange(logits.shape[1])[None, :]
    ahead = (logits > truth) | ((logits == truth) & (cols < labels[:, None]))
    return ahead.sum(axis=1)


def metrics_from_logits(logits, labels, ks=(1, 5)) -> Metrics:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot compute metrics on an empty split")
    num_classes = logits.shape[1]
    ranks = prediction_ranks(logits, labels)
    loss = float(cross_entropy(torch.from_numpy(logits), torch.from_numpy(labels)))
    topk = {int(k): float(np.mean(ranks < min(k, num_classes))) for k in ks}
    per_class = {int(c): float(np.mean(ranks[labels == c] == 0)) for c in np.unique(labels)}
    return Metrics(float(np.mean(ranks == 0)), topk, loss, per_class, len(labels))


def _resolve_ids(corpus: Corpus, split) -> list[str]:
    return corpus.split(split) if isinstance(split, str) else list(split)


def _apply(pipeline, pose: PoseSequence, rng: RandomSource, selection) -> PoseSequence:
    return compose(pipeline, pose, rng, selection) if pipeline else pose


def predict_logits(model: PoseClassifier, poses: list[PoseSequence], batch_size: int = 64) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(poses), batch_size):
            x, lengths = collate(poses[i:i + batch_size])
            out.append(model(x, lengths).double().numpy())
    model.train(was_training)
    return np.concatenate(out)


def evaluate(model: PoseClassifier, corpus: Corpus, split, ks=(1, 5), transforms=(),
             selection: KeypointSelection | None = None, batch_size: int = 64) -> Metrics:
    """Metrics on ``split`` (a split name or list of ids); parameters are left untouched."""
    ids = _resolve_ids(corpus, split)
    if not ids:
        raise ValueError("evaluation split is empty")
    rng = RandomSource(0)
    poses = [_apply(transforms, corpus.get(i).pose, rng, selection) for i in ids]
    return metrics_from_logits(predict_logits(model, poses, batch_size), corpus.labels(ids), ks)


def transplant_encoder(model: PoseClassifier, params: ParameterSet, head_seed: int,
                       allow_mismatch: bool = False) -> list[str]:
    """Load encoder tensors from ``params`` and attach a freshly initialized head.

    A different encoder configuration or a missing/mis-shaped tensor is fatal
    unless ``allow_mismatch``, in which case only matching tensors are copied.
    The architecture family must always match.
    """
    if params.architecture != model.architecture:
        raise CheckpointMismatch(
            f"pretrained {params.architecture!r} encoder cannot initialize a {model.architecture!r} model"
        )
    source_hash = ModelConfig.from_dict(params.config).encoder_hash if params.config else params.config_hash
    if source_hash != model.config.encoder_hash and not allow_mismatch:
        raise CheckpointMismatch("pretrained encoder configuration differs from the model being trained")
    encoder = ParameterSet(params.architecture, params.config_hash,
                           {n: t for n, t in params.tensors.items() if not n.startswith("head.")})
    copied = load_parameters(model, encoder, allow_mismatch=True, strict=False)
    expected = {n for n, _ in model.encoder_parameters()}
    if set(copied) != expected and not allow_mismatch:
        raise CheckpointMismatch(f"pretrained encoder lacks {sorted(expected - set(copied))[:3]}")
    reset_head(model, head_seed)
    return copied


@dataclass
class TrainResult:
    params: ParameterSet
    history: list[dict]
    best_epoch: int
    best_val: Metrics
    model: PoseClassifier


def train_classifier(
    config: TrainConfig,
    corpus: Corpus,
    train_split,
    val_split,
    initial_params: ParameterSet | None = None,
    graph: SkeletonGraph | None = None,
    selection: KeypointSelection | None = None,
    metrics_path: str | Path | None = None,
) -> TrainResult:
    """Train from scratch, or fine-tune when ``initial_params`` holds a pretrained encoder.

    Keeps the parameters with the best validation top-1; ties go to the lower
    validation loss, then to the earlier epoch.
    """
    train_ids = _resolve_ids(corpus, train_split)
    val_ids = _resolve_ids(corpus, val_split)
    if not val_ids:
        raise ValueError("validation split is empty")
    if not train_ids and config.max_epochs > 0:
        raise ValueError("training split is empty")
    overlap = set(train_ids) & set(val_ids)
    if overlap:
        raise ValueError(f"train and validation splits overlap on {len(overlap)} sample(s), e.g. {sorted(overlap)[0]!r}")
    num_classes = config.model.num_classes
    if corpus.vocabulary and len(corpus.vocabulary) != num_classes:
        raise ValueError(f"corpus vocabulary has {len(corpus.vocabulary)} glosses, model has {num_classes} classes")
    labels_all = corpus.labels(train_ids + val_ids)
    if (labels_all < 0).any() or (labels_all >= num_classes).any():
        raise ValueError("split contains unlabeled samples or labels outside the model's classes")

    rng = RandomSource(config.seed)
    torch.manual_seed(rng.child("torch").torch_seed())
    model = init_parameters(config.model, rng.child("init").torch_seed(), graph)
    if initial_params is not None:
        if initial_params.config_hash == config.model.config_hash and "head.weight" in initial_params.tensors:
            load_parameters(model, initial_params)
        else:
            transplant_encoder(model, initial_params, rng.child("head").torch_seed())

    train_poses = [corpus.get(i).pose for i in train_ids]
    train_labels = corpus.labels(train_ids)
    eval_rng = RandomSource(0)
    val_poses = [_apply(config.eval_transforms, corpus.get(i).pose, eval_rng, selection) for i in val_ids]
    val_labels = corpus.labels(val_ids)
    ks = tuple(sorted(set(config.topk)))

    sink = open(metrics_path, "w") if metrics_path else None
    history = []

    def record(epoch, train_loss, val, started):
        entry = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_top1": val.top1,
            "val_topk": {str(k): v for k, v in val.topk.items()},
            "val_loss": val.loss,
            "wall_time_s": time.monotonic() - started,
        }
        history.append(entry)
        if sink:
            sink.write(json.dumps(entry) + "\n")
            sink.flush()

    try:
        started = time.monotonic()
        best_val = metrics_from_logits(predict_logits(model, val_poses), val_labels, ks)
        best = ParameterSet.from_model(model)
        best_epoch = 0
        if config.max_epochs == 0:
            record(0, None, best_val, started)
        optimizer = Adam(model.parameters(), config.learning_rate, (config.beta1, config.beta2), config.adam_eps)
        stale = 0
        for epoch in range(1, config.max_epochs + 1):
            started = time.monotonic()
            if config.lr_decay_every:
                optimizer.lr = config.learning_rate * config.lr_decay ** ((epoch - 1) // config.lr_decay_every)
            epoch_rng = rng.child(f"epoch:{epoch}")
            order = epoch_rng.permutation(len(train_ids))
            model.train()
            total, seen = 0.0, 0
            for b in range(0, len(order), config.batch_size):
                idx = order[b:b + config.batch_size]
                poses = [
                    _apply(config.train_transforms, train_poses[i], epoch_rng.child(f"aug:{train_ids[i]}"), selection)
                    for i in idx
                ]
                x, lengths = collate(poses)
                loss = cross_entropy(model(x, lengths), torch.from_numpy(train_labels[idx]))
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss {loss.item()} at epoch {epoch}, batch {b // config.batch_size} "
                        f"(samples {[train_ids[i] for i in idx[:4]]}); try a lower learning_rate"
                    )
                optimizer.zero_grad()
                backward(model, loss)
                optimizer.step()
                total += loss.item() * len(idx)
                seen += len(idx)
            val = metrics_from_logits(predict_logits(model, val_poses), val_labels, ks)
            record(epoch, total / seen, val, started)
            if best_epoch == 0 or (val.top1, -val.loss) > (best_val.top1, -best_val.loss):
                best_val, best, best_epoch, stale = val, ParameterSet.from_model(model), epoch, 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    finally:
        if sink:
            sink.close()

    load_parameters(model, best)
    model.eval()
    return TrainResult(best, history, best_epoch, best_val, model)
