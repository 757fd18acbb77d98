"""Command-line entry point: ``slrkit <command> --config run.yaml [--set key=value ...]``.

Every command writes ``<output>/manifest.json`` holding the resolved config,
the run seed, content hashes of the inputs and the produced outputs, and a
status (``complete`` or ``failed``). Exit status is 0 on success, 1 for a
configuration error and 2 for any failure while running.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import torch

from .config import ConfigError, RunConfig, dump_config, load_config
from .corpus import Corpus, pack, read_pose_jsonl, subset_by_samples_per_class
from .models import ParameterSet, init_parameters, model_from_checkpoint
from .pose import LabeledSample, validate_sequence
from .pretrain import dpc_pretrain, masked_pretrain, moco_pretrain, transplant
from .rng import RandomSource
from .stream import (
    StreamServer,
    benchmark_latency,
    default_stream_selection,
    parse_endpoint,
    serve_stdio,
)
from .synthetic import make_synthetic_corpus
from .train import evaluate, train_classifier
from .util import worker_threads

COMMANDS = ("pack", "validate", "pretrain", "train", "finetune", "evaluate", "benchmark", "serve")
MANIFEST_NAME = "manifest.json"
# per-record fields that carry wall-clock measurements, ignored when hashing outputs
VOLATILE_FIELDS = ("wall_time_s", "latencies_ms", "mean", "p50", "p95", "min", "max", "host")


def _blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(path: str | Path) -> str:
    """Git-style content hash: a blob hash for files, a tree-like hash over sorted entries for directories."""
    path = Path(path)
    if path.is_dir():
        lines = [f"{p.relative_to(path).as_posix()} {_blob_hash(p.read_bytes())}"
                 for p in sorted(path.rglob("*")) if p.is_file()]
        return _blob_hash("\n".join(lines).encode())
    return _blob_hash(path.read_bytes())


def _scrub(obj):
    if isinstance(obj, dict):
        return {k: _scrub(v) for k, v in obj.items() if k not in VOLATILE_FIELDS}
    if isinstance(obj, list):
        return [_scrub(v) for v in obj]
    return obj


def output_hash(path: str | Path) -> str:
    """Like ``content_hash`` but JSON documents are hashed with timing fields removed."""
    path = Path(path)
    if path.suffix == ".jsonl":
        records = [_scrub(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]
        return _blob_hash(json.dumps(records, sort_keys=True).encode())
    if path.suffix == ".json":
        return _blob_hash(json.dumps(_scrub(json.loads(path.read_text())), sort_keys=True).encode())
    return content_hash(path)


class Run:
    """Bookkeeping for one command: inputs, outputs and the manifest."""

    def __init__(self, command: str, config: RunConfig):
        self.command = command
        self.config = config
        self.out = Path(config.output)
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.started = time.time()

    def input(self, path: str | Path) -> Path:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"input {path} does not exist")
        self.inputs[str(path)] = content_hash(path)
        return path

    def output(self, name: str, path: str | Path | None = None) -> Path:
        path = Path(path) if path is not None else self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        self.outputs[name] = str(path)
        return path

    def write_json(self, name: str, obj) -> Path:
        path = self.output(name, self.out / f"{name}.json")
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        return path

    def manifest(self, status: str, error: str = "") -> dict:
        hashes = {}
        for name, path in self.outputs.items():
            if Path(path).exists():
                hashes[name] = output_hash(path)
        return {
            "command": self.command,
            "status": status,
            "error": error,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "output_hashes": hashes,
            "started": self.started,
            "wall_time_s": time.time() - self.started,
        }

    def finish(self, status: str, error: str = "") -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / MANIFEST_NAME
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.manifest(status, error), indent=2, sort_keys=True) + "\n")
        tmp.replace(path)
        return path


def _open_corpus(run: Run) -> Corpus:
    if not run.config.data.corpus:
        raise ConfigError("this command needs data.corpus", "data.corpus")
    return Corpus(run.input(run.config.data.corpus))


def _training_ids(run: Run, corpus: Corpus) -> list[str]:
    data = run.config.data
    if data.subset is None:
        return corpus.split(data.train_split)
    return subset_by_samples_per_class(corpus, data.subset, data.train_split)


def _load_model(run: Run, checkpoint: str):
    if checkpoint:
        return model_from_checkpoint(run.input(checkpoint))
    model = init_parameters(run.config.require_model(), RandomSource(run.config.component_seed("init")).torch_seed())
    model.eval()
    return model


def cmd_pack(run: Run) -> dict:
    cfg = run.config
    if not cfg.data.corpus:
        raise ConfigError("pack needs data.corpus as its destination", "data.corpus")
    destination = run.output("corpus", cfg.data.corpus)
    pack_cfg = cfg.pack
    if pack_cfg.source == "synthetic":
        manifest = make_synthetic_corpus(destination, pack_cfg.synthetic)
    else:
        glosses = sorted({e.gloss for e in pack_cfg.samples if e.gloss})
        labeled = bool(glosses)
        if labeled and any(not e.gloss for e in pack_cfg.samples):
            raise ConfigError("either every pack entry names a gloss or none does", "pack.samples")
        index = {g: i for i, g in enumerate(glosses)}
        splits: dict[str, list[str]] = {}
        samples = []
        for entry in pack_cfg.samples:
            sid = entry.id or Path(entry.path).stem
            pose = read_pose_jsonl(run.input(entry.path), fps=pack_cfg.fps)
            samples.append(LabeledSample(pose, index[entry.gloss] if labeled else None, entry.gloss, sid, entry.signer))
            if entry.split:
                splits.setdefault(entry.split, []).append(sid)
        manifest = pack(samples, destination, corpus_id=pack_cfg.corpus_id or None, vocabulary=glosses,
                        splits=splits, max_missing_fraction=pack_cfg.max_missing_fraction)
    return {"samples": len(manifest.samples), "vocabulary": len(manifest.vocabulary),
            "splits": {k: len(v) for k, v in manifest.splits.items()}}


def cmd_validate(run: Run) -> dict:
    threshold = run.config.pack.max_missing_fraction
    rejected = {}
    with _open_corpus(run) as corpus:
        corpus.manifest.validate()
        for sid in corpus.ids:
            verdict = validate_sequence(corpus.get(sid).pose, threshold)
            if not verdict:
                rejected[sid] = verdict.reason
        summary = {"samples": len(corpus), "rejected": rejected,
                   "splits": {k: len(v) for k, v in corpus.manifest.splits.items()}}
    run.write_json("validation", summary)
    if rejected:
        raise ValueError(f"{len(rejected)} sample(s) fail validation, e.g. {next(iter(rejected))!r}")
    return summary


def cmd_pretrain(run: Run) -> dict:
    cfg = run.config
    section = cfg.pretrain
    config = cfg.pretrain_config()
    log = run.output("history", run.out / "pretrain.jsonl")
    with _open_corpus(run) as corpus:
        ids = corpus.split(cfg.data.pretrain_split)
        if section.strategy == "dpc":
            result = dpc_pretrain(corpus, section.dpc, config, ids=ids, log_path=log)
        elif section.strategy == "moco":
            result = moco_pretrain(corpus, section.moco, config, ids=ids, log_path=log)
        else:
            result = masked_pretrain(corpus, section.mask, config, ids=ids, log_path=log)
    result.encoder.save(run.output("encoder", run.out / "encoder.ckpt"))
    last = result.history[-1]["loss"] if result.history else None
    return {"strategy": section.strategy, "steps": len(result.history), "final_loss": last}


def _train(run: Run, initial: ParameterSet | None) -> dict:
    cfg = run.config
    config = cfg.train_config()
    with _open_corpus(run) as corpus:
        ids = _training_ids(run, corpus)
        result = train_classifier(config, corpus, ids, cfg.data.val_split, initial_params=initial,
                                  metrics_path=run.output("metrics", run.out / "metrics.jsonl"))
    result.params.save(run.output("checkpoint", run.out / "model.ckpt"))
    return {"train_samples": len(ids), "best_epoch": result.best_epoch, "val": result.best_val.to_dict()}


def cmd_train(run: Run) -> dict:
    return _train(run, None)


def cmd_finetune(run: Run) -> dict:
    cfg = run.config
    if not cfg.finetune.init_from:
        raise ConfigError("finetune needs finetune.init_from", "finetune.init_from")
    pretrained = ParameterSet.load(run.input(cfg.finetune.init_from))
    if cfg.finetune.allow_mismatch:
        pretrained = transplant(pretrained, cfg.require_model(), cfg.component_seed("head"), allow_mismatch=True)
    return _train(run, pretrained)


def cmd_evaluate(run: Run) -> dict:
    cfg = run.config
    checkpoint = cfg.evaluate.checkpoint
    if not checkpoint:
        raise ConfigError("evaluate needs evaluate.checkpoint", "evaluate.checkpoint")
    model = model_from_checkpoint(run.input(checkpoint))
    with _open_corpus(run) as corpus:
        metrics = evaluate(model, corpus, cfg.data.eval_split, ks=cfg.evaluate.topk, transforms=cfg.transforms.eval)
    result = {"split": cfg.data.eval_split, **metrics.to_dict()}
    run.write_json("evaluation", result)
    return result


def cmd_benchmark(run: Run) -> dict:
    cfg = run.config
    section = cfg.benchmark
    model = _load_model(run, section.checkpoint)
    with _open_corpus(run) as corpus:
        report = benchmark_latency(model, corpus, section.split, repetitions=section.repetitions,
                                   warmup=section.warmup, normalization=cfg.transforms.eval,
                                   selection=default_stream_selection(model))
    result = report.to_dict()
    run.write_json("latency", result)
    return {k: result[k] for k in ("mean", "p50", "p95", "min", "max", "model_id")}


def cmd_serve(run: Run) -> dict:
    cfg = run.config
    section = cfg.serve
    if not section.checkpoint:
        raise ConfigError("serve needs serve.checkpoint", "serve.checkpoint")
    model = model_from_checkpoint(run.input(section.checkpoint))
    vocabulary = list(section.vocabulary)
    if not vocabulary and cfg.data.corpus:
        with _open_corpus(run) as corpus:
            vocabulary = list(corpus.vocabulary)
    try:
        address = parse_endpoint(section.endpoint)
    except ValueError as exc:
        raise ConfigError(str(exc), "serve.endpoint") from exc
    kw = {"normalization": cfg.transforms.eval, "selection": default_stream_selection(model)}
    if address is None:
        stats = serve_stdio(model, vocabulary, section.window, **kw)
        return {"windows": stats.windows, "dropped": stats.dropped, "predictions": stats.predictions}
    server = StreamServer(address, model, vocabulary, section.window, **kw)
    print(f"serving on {server.server_address[0]}:{server.port}", file=sys.stderr, flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return {"sessions": len(server.sessions), "dropped": sum(s.dropped for s in server.sessions)}


HANDLERS = {
    "pack": cmd_pack,
    "validate": cmd_validate,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
    "serve": cmd_serve,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # bad usage is a configuration error, not a runtime failure
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slrkit", description="Pose-based isolated sign recognition toolkit.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value by dotted path (repeatable)")
    return parser


def run(command: str, config_path: str | Path, overrides=()) -> int:
    try:
        config = load_config(config_path, overrides)
        torch.set_num_threads(worker_threads())
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    job = Run(command, config)
    try:
        job.output("config", job.out / "config.yaml").write_text(dump_config(config))
        summary = HANDLERS[command](job)
    except ConfigError as exc:
        job.finish("failed", str(exc))
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every delegated failure maps to exit status 2
        job.finish("failed", f"{type(exc).__name__}: {exc}")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    job.finish("complete")
    if command != "serve" or parse_endpoint(config.serve.endpoint) is not None:
        print(json.dumps(summary, sort_keys=True))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.command, args.config, args.overrides)


if __name__ == "__main__":
    sys.exit(main())
