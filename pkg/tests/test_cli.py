import json
import os
import subprocess
import sys

import numpy as np
import pytest
import yaml

from slrkit.cli import content_hash, main
from slrkit.config import RunConfig, load_config, parse_config
from slrkit.corpus import Corpus, write_pose_jsonl
from slrkit.models import ParameterSet

from conftest import random_pose

BASE = {
    "seed": 5,
    "data": {"corpus": "syn"},
    "pack": {"synthetic": {"num_classes": 3, "samples_per_class": 6, "frames": 24, "seed": 2}},
    "model": {"variant": "stgcn", "num_classes": 3,
              "stgcn": {"channels": [4, 4], "strides": [1, 2], "temporal_kernel": 3}},
    "train": {"max_epochs": 2, "batch_size": 8, "topk": [2]},
    "pretrain": {"strategy": "dpc", "steps": 2, "batch_size": 4, "min_clip_len": 12, "max_clip_len": 20,
                 "dpc": {"window_len": 3, "input_windows": 2, "predict_windows": 1}},
}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "run.yaml").write_text(yaml.safe_dump(BASE))
    assert main(["pack", "--config", "run.yaml", "--set", "output=out/pack"]) == 0
    return tmp_path


def manifest(path):
    return json.loads((path / "manifest.json").read_text())


def test_train_emits_checkpoint_metrics_and_manifest(workdir):
    assert main(["train", "--config", "run.yaml", "--set", "output=out/train"]) == 0
    out = workdir / "out/train"
    params = ParameterSet.load(out / "model.ckpt")
    assert params.architecture == "stgcn"
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2]
    m = manifest(out)
    assert m["status"] == "complete" and m["seed"] == 5
    assert m["inputs"] == {"syn": content_hash(workdir / "syn")}
    assert set(m["output_hashes"]) == {"config", "metrics", "checkpoint"}

    first = m["output_hashes"]
    assert main(["train", "--config", "run.yaml", "--set", "output=out/train"]) == 0
    assert manifest(out)["output_hashes"] == first

    again = parse_config(m["config"])
    assert again == load_config(workdir / "run.yaml", ["output=out/train"])
    assert parse_config(yaml.safe_load((out / "config.yaml").read_text())) == again


def test_content_hash_matches_git_blob(tmp_path):
    (tmp_path / "f").write_bytes(b"hello\n")
    assert content_hash(tmp_path / "f") == "ce013625030ba8dba906f756967f9e9ca394464a"


@pytest.mark.parametrize("overrides,key", [
    (["train.learning_rte=0.1"], "learning_rte"),
    (["model.stgcn.chanels=[2]"], "chanels"),
    (["bogus=1"], "bogus"),
])
def test_unknown_key_is_config_error(workdir, capsys, overrides, key):
    args = ["train", "--config", "run.yaml"] + [x for o in overrides for x in ("--set", o)]
    assert main(args) == 1
    assert key in capsys.readouterr().err


def test_invalid_values_are_config_errors(workdir, capsys):
    assert main(["train", "--config", "run.yaml", "--set", "train.batch_size=zero"]) == 1
    assert "train.batch_size" in capsys.readouterr().err
    assert main(["train", "--config", "run.yaml", "--set", "train.learning_rate=-1"]) == 1
    assert main(["pretrain", "--config", "run.yaml", "--set", "pretrain.strategy=simclr"]) == 1
    assert main(["train", "--config", "run.yaml", "--set", "format_version=2"]) == 1
    assert main(["train", "--config", "missing.yaml"]) == 1
    (workdir / "dup.yaml").write_text("seed: 1\nseed: 2\n")
    assert main(["train", "--config", "dup.yaml"]) == 1
    assert "duplicate" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["fly", "--config", "run.yaml"])
    assert exc.value.code == 1


def test_runtime_failure_exit_two_and_flagged(workdir):
    assert main(["train", "--config", "run.yaml", "--set", "data.corpus=nowhere", "--set", "output=out/x"]) == 2
    assert manifest(workdir / "out/x")["status"] == "failed"
    assert main(["train", "--config", "run.yaml", "--set", "data.val_split=dev", "--set", "output=out/y"]) == 2
    m = manifest(workdir / "out/y")
    assert m["status"] == "failed" and "dev" in m["error"]


def test_pretrain_then_low_resource_finetune(workdir):
    assert main(["pretrain", "--config", "run.yaml", "--set", "output=out/dpc"]) == 0
    encoder = ParameterSet.load(workdir / "out/dpc/encoder.ckpt")
    assert not any(name.startswith("head.") for name in encoder.tensors)
    assert len((workdir / "out/dpc/pretrain.jsonl").read_text().splitlines()) == 2
    args = ["finetune", "--config", "run.yaml", "--set", "output=out/ft", "--set",
            "finetune.init_from=out/dpc/encoder.ckpt", "--set", "data.subset.samples_per_class=2"]
    assert main(args) == 0
    summary = manifest(workdir / "out/ft")
    assert "out/dpc/encoder.ckpt" in summary["inputs"]
    assert main(["finetune", "--config", "run.yaml", "--set", "output=out/ft2"]) == 1


def test_pretrain_strategies(workdir):
    assert main(["pretrain", "--config", "run.yaml", "--set", "output=out/moco", "--set", "pretrain.strategy=moco",
                 "--set", "pretrain.moco.bank_capacity=8"]) == 0
    masked = ["pretrain", "--config", "run.yaml", "--set", "output=out/mask", "--set", "pretrain.strategy=masked",
              "--set", "model.variant=transformer", "--set", "model.transformer.layers=1",
              "--set", "model.transformer.hidden=8", "--set", "model.transformer.heads=2",
              "--set", "model.transformer.ffn=8"]
    assert main(masked) == 0


def test_evaluate_and_benchmark(workdir):
    assert main(["train", "--config", "run.yaml", "--set", "output=out/train"]) == 0
    assert main(["evaluate", "--config", "run.yaml", "--set", "output=out/eval",
                 "--set", "evaluate.checkpoint=out/train/model.ckpt"]) == 0
    report = json.loads((workdir / "out/eval/evaluation.json").read_text())
    assert report["split"] == "test" and report["count"] == 3 and 0 <= report["top1"] <= 1
    assert main(["evaluate", "--config", "run.yaml", "--set", "output=out/eval2"]) == 1
    assert main(["benchmark", "--config", "run.yaml", "--set", "output=out/bench",
                 "--set", "benchmark.warmup=1", "--set", "benchmark.repetitions=2"]) == 0
    latency = json.loads((workdir / "out/bench/latency.json").read_text())
    assert len(latency["latencies_ms"]) == 6 and latency["warmup_runs"] == 1


def test_validate_and_jsonl_pack(workdir, np_rng):
    entries, poses = [], []
    for i in range(4):
        pose = random_pose(np_rng, frames=5, keypoints=27, missing=0.5 if i == 3 else 0.0)
        poses.append(pose)
        write_pose_jsonl(pose, workdir / f"clip{i}.jsonl")
        entries.append({"path": f"clip{i}.jsonl", "gloss": "ab"[i % 2], "split": "train"})
    cfg = {"data": {"corpus": "imported"}, "pack": {"source": "jsonl", "samples": entries}, "output": "out/imp"}
    (workdir / "imp.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["pack", "--config", "imp.yaml"]) == 0
    with Corpus(workdir / "imported") as c:
        assert c.vocabulary == ["a", "b"] and c.split("train") == ["clip0", "clip1", "clip2", "clip3"]
        for i, pose in enumerate(poses):
            stored = c.get(f"clip{i}").pose
            assert np.array_equal(stored.data[stored.valid], pose.data.astype(np.float32)[pose.valid])
    assert main(["validate", "--config", "imp.yaml", "--set", "output=out/v1"]) == 0
    assert main(["validate", "--config", "imp.yaml", "--set", "output=out/v2",
                 "--set", "pack.max_missing_fraction=0.2"]) == 2
    assert json.loads((workdir / "out/v2/validation.json").read_text())["rejected"].keys() == {"clip3"}


def test_thread_cap_env(workdir, monkeypatch):
    monkeypatch.setenv("SLRKIT_THREADS", "many")
    assert main(["train", "--config", "run.yaml"]) == 1


def test_serve_stdio_subprocess(workdir, np_rng):
    assert main(["train", "--config", "run.yaml", "--set", "output=out/train"]) == 0
    pose = random_pose(np_rng, frames=40, keypoints=27)
    lines = [json.dumps({"type": "hello", "k": 27, "fps": 30, "format_version": 1})]
    lines += [json.dumps({"type": "frame", "t": t, "kps": pose.data[t].tolist()}) for t in range(40)]
    env = {**os.environ, "SLRKIT_THREADS": "1"}
    proc = subprocess.run(
        [sys.executable, "-m", "slrkit.cli", "serve", "--config", "run.yaml", "--set", "output=out/serve",
         "--set", "serve.checkpoint=out/train/model.ckpt", "--set", "serve.window.window_len=20",
         "--set", "serve.window.stride=10", "--set", "serve.window.k=2", "--set", "serve.window.queue_depth=8"],
        input="\n".join(lines) + "\n", capture_output=True, text=True, env=env, timeout=120,
    )
    assert proc.returncode == 0, proc.stderr
    msgs = [json.loads(x) for x in proc.stdout.splitlines()]
    preds = [m for m in msgs if m["type"] == "prediction"]
    assert [p["window_id"] for p in preds] == [0, 1, 2]
    assert all(p["top_k"][0][0].startswith("sign") for p in preds)
    assert msgs[-1] == {"type": "bye", "windows": 3, "dropped": 0}


def test_default_config_round_trip():
    cfg = RunConfig()
    assert parse_config(cfg.to_dict()) == cfg


@pytest.mark.parametrize("name", ["synthetic.yaml", "dpc_lowres.yaml"])
def test_shipped_configs_parse(name):
    from pathlib import Path

    cfg = load_config(Path(__file__).parent.parent / "configs" / name)
    assert cfg.model is not None and cfg.train_config().model.num_classes == cfg.model.num_classes
