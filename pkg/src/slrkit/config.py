"""Run configuration: one YAML document drives every CLI command.

Unknown keys anywhere in the document are rejected with the dotted path of
the offending key. ``--set a.b=value`` overrides are applied to the raw
document before validation, with ``value`` parsed as a YAML scalar.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .corpus import SubsetSpec
from .models.config import ModelConfig
from .pretrain import DpcConfig, MaskConfig, MocoConfig, PretrainConfig
from .rng import derive_seed
from .stream import StreamConfig
from .synthetic import SyntheticSpec
from .train import TrainConfig
from .transforms import parse_pipeline
from .util import ConfigError, from_dict, to_dict

RUN_FORMAT_VERSION = 1
STRATEGIES = ("dpc", "moco", "masked")


@dataclass
class PackEntry:
    path: str
    gloss: str = ""
    split: str = ""
    signer: str = ""
    id: str = ""


@dataclass
class PackSection:
    # "synthetic" generates a corpus, "jsonl" imports per-frame JSON-lines clips listed in ``samples``
    source: str = "synthetic"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    samples: list[PackEntry] = field(default_factory=list)
    fps: float = 30.0
    max_missing_fraction: float = 1.0
    corpus_id: str = ""

    def __post_init__(self):
        if self.source not in ("synthetic", "jsonl"):
            raise ValueError("pack.source must be 'synthetic' or 'jsonl'")
        if self.source == "jsonl" and not self.samples:
            raise ValueError("pack.source 'jsonl' needs a non-empty samples list")


@dataclass
class DataSection:
    corpus: str = ""
    train_split: str = "train"
    val_split: str = "val"
    eval_split: str = "test"
    # pretraining draws clips from this split; "all" uses every sample
    pretrain_split: str = "all"
    subset: SubsetSpec | None = None


@dataclass
class TransformSection:
    train: list = field(default_factory=lambda: [{"name": "center_and_scale_normalize"}])
    eval: list = field(default_factory=lambda: [{"name": "center_and_scale_normalize"}])

    def __post_init__(self):
        self.train = [s.to_dict() for s in parse_pipeline(self.train)]
        self.eval = [s.to_dict() for s in parse_pipeline(self.eval)]


@dataclass
class TrainSection:
    batch_size: int = 32
    learning_rate: float = 1e-3
    max_epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 50
    lr_decay_every: int = 0
    lr_decay: float = 1.0
    topk: tuple[int, ...] = (5,)


@dataclass
class PretrainSection:
    strategy: str = "dpc"
    batch_size: int = 128
    learning_rate: float = 1e-3
    steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    min_clip_len: int = 60
    max_clip_len: int = 120
    dpc: DpcConfig = field(default_factory=DpcConfig)
    moco: MocoConfig = field(default_factory=MocoConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"pretrain.strategy must be one of {STRATEGIES}")


@dataclass
class FinetuneSection:
    init_from: str = ""
    allow_mismatch: bool = False


@dataclass
class EvaluateSection:
    checkpoint: str = ""
    topk: tuple[int, ...] = (1, 5)


@dataclass
class BenchmarkSection:
    # empty checkpoint: time a freshly initialized model built from ``model``
    checkpoint: str = ""
    split: str = "test"
    repetitions: int = 1
    warmup: int = 5


@dataclass
class ServeSection:
    checkpoint: str = ""
    endpoint: str = "stdio"
    window: StreamConfig = field(default_factory=StreamConfig)
    # empty: take the vocabulary of data.corpus when given
    vocabulary: list[str] = field(default_factory=list)


@dataclass
class RunConfig:
    format_version: int = RUN_FORMAT_VERSION
    seed: int = 0
    output: str = "run"
    data: DataSection = field(default_factory=DataSection)
    pack: PackSection = field(default_factory=PackSection)
    model: ModelConfig | None = None
    transforms: TransformSection = field(default_factory=TransformSection)
    train: TrainSection = field(default_factory=TrainSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)
    serve: ServeSection = field(default_factory=ServeSection)

    def __post_init__(self):
        if self.format_version != RUN_FORMAT_VERSION:
            raise ConfigError(f"unsupported format_version {self.format_version}", "format_version")

    def to_dict(self) -> dict:
        return to_dict(self)

    def component_seed(self, name: str) -> int:
        """Seed for one component, derived from the run seed and the component name."""
        return derive_seed(self.seed, name)

    def require_model(self) -> ModelConfig:
        if self.model is None:
            raise ConfigError("this command needs a model section", "model")
        return self.model

    def train_config(self) -> TrainConfig:
        t = self.train
        try:
            return TrainConfig(
                model=self.require_model(), batch_size=t.batch_size, learning_rate=t.learning_rate,
                max_epochs=t.max_epochs, seed=self.component_seed("train"), beta1=t.beta1, beta2=t.beta2,
                adam_eps=t.adam_eps, patience=t.patience, lr_decay_every=t.lr_decay_every,
                lr_decay=t.lr_decay, train_transforms=self.transforms.train,
                eval_transforms=self.transforms.eval, topk=t.topk,
            )
        except ValueError as exc:
            raise ConfigError(str(exc), "train") from exc

    def pretrain_config(self) -> PretrainConfig:
        p = self.pretrain
        try:
            return PretrainConfig(
                model=self.require_model(), batch_size=p.batch_size, learning_rate=p.learning_rate,
                steps=p.steps, seed=self.component_seed("pretrain"), beta1=p.beta1, beta2=p.beta2,
                adam_eps=p.adam_eps, min_clip_len=p.min_clip_len, max_clip_len=p.max_clip_len,
                transforms=self.transforms.train,
            )
        except ValueError as exc:
            raise ConfigError(str(exc), "pretrain") from exc


def parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_overrides(document: dict, overrides) -> dict:
    """Return a copy of ``document`` with ``key.path=value`` assignments applied."""
    doc = copy.deepcopy(document)
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value", "--set")
        parts = key.split(".")
        node = doc
        for depth, part in enumerate(parts[:-1]):
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            elif not isinstance(child, dict):
                raise ConfigError(f"cannot descend into non-mapping value", ".".join(parts[:depth + 1]))
            node = child
        node[parts[-1]] = parse_value(raw)
    return doc


def parse_config(document, overrides=()) -> RunConfig:
    if document is None:
        document = {}
    if not isinstance(document, dict):
        raise ConfigError("the config document must be a mapping")
    return from_dict(RunConfig, apply_overrides(document, overrides))


def _unique_key_loader():
    class Loader(yaml.SafeLoader):
        pass

    def construct_mapping(loader, node, deep=False):
        seen = set()
        for key_node, _ in node.value:
            key = loader.construct_object(key_node, deep=deep)
            if key in seen:
                raise ConfigError(f"duplicate key {key!r} (line {key_node.start_mark.line + 1})", str(key))
            seen.add(key)
        return yaml.SafeLoader.construct_mapping(loader, node, deep)

    Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, construct_mapping)
    return Loader


def load_config(path: str | Path, overrides=()) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path)) from exc
    try:
        document = yaml.load(text, Loader=_unique_key_loader())
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}", str(path)) from exc
    return parse_config(document, overrides)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
