"""End-to-end acceptance checks, one test per criterion.

Each test appends a PASS/FAIL line to the terminal summary. The slow ones
(training, pretraining, the 60 s stream) carry the ``slow`` marker.
"""

import decimal
import io
import itertools
import json
import math
import socket
import threading
import time
from contextlib import contextmanager
from decimal import Decimal

import numpy as np
import pytest
import torch

import slrkit.transforms as T
from slrkit.corpus import Corpus, SubsetSpec, pack, subset_by_samples_per_class
from slrkit.models import LSTMConfig, ModelConfig, STGCNConfig, TransformerConfig, init_parameters, toy_config
from slrkit.pose import LabeledSample, PoseSequence, default_selection
from slrkit.pretrain import (
    DpcConfig,
    MaskConfig,
    PretrainConfig,
    dpc_pretrain,
    infonce_loss,
    masked_pretrain,
    static_fraction,
)
from slrkit.stream import (
    StreamConfig,
    StreamServer,
    benchmark_latency,
    frames_of,
    predict_window,
    serve_stdio,
)
from slrkit.synthetic import SyntheticSpec, make_synthetic_corpus
from slrkit.train import TrainConfig, evaluate, train_classifier

from conftest import ACCEPTANCE_LINES, interpolation_oracle, random_pose
from gradcheck import check_gradients

NORM = [{"name": "center_and_scale_normalize"}]


@contextmanager
def criterion(number, title):
    """Record a PASS/FAIL line for ``number``; ``detail`` entries are appended to it."""
    detail = []
    start = time.monotonic()
    try:
        yield detail
    except BaseException as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        ACCEPTANCE_LINES.append(f"[FAIL] criterion {number}: {title} ({'; '.join(detail + [msg])})")
        print(ACCEPTANCE_LINES[-1])
        raise
    took = time.monotonic() - start
    ACCEPTANCE_LINES.append(f"[PASS] criterion {number}: {title} ({'; '.join(detail + [f'{took:.0f}s'])})")
    print(ACCEPTANCE_LINES[-1])


def pairwise(xy):
    return np.linalg.norm(xy[:, :, None, :] - xy[:, None, :, :], axis=-1)


def test_transform_properties():
    rng = np.random.default_rng(20240501)
    n = 1000
    with criterion(1, "transform property suite, 1000 instances per invariant") as detail:
        start = time.monotonic()
        worst = {"rotation": 0.0, "scale_angle": 0.0, "normalize": 0.0}
        for _ in range(n):
            pose = random_pose(rng, frames=int(rng.integers(1, 9)), keypoints=int(rng.integers(2, 28)))
            xy = pose.data.astype(np.float64)

            rotated = T.apply_rotation(pose, rng.uniform(-math.pi / 3, math.pi / 3)).data.astype(np.float64)
            worst["rotation"] = max(worst["rotation"], float(np.abs(pairwise(rotated) - pairwise(xy)).max()))

            sheared = T.apply_shear(pose, rng.uniform(-0.15, 0.15))
            assert np.array_equal(sheared.data[..., 1], pose.data[..., 1])

            scaled = T.apply_scale(pose, rng.uniform(0.8, 1.2)).data.astype(np.float64)
            a, b = xy[:, 0] - xy[:, 1], scaled[:, 0] - scaled[:, 1]
            c, d = xy[:, -1] - xy[:, 1], scaled[:, -1] - scaled[:, 1]
            ok = (np.linalg.norm(a, axis=-1) > 1e-3) & (np.linalg.norm(c, axis=-1) > 1e-3)
            ang0 = np.arctan2(a[:, 0] * c[:, 1] - a[:, 1] * c[:, 0], (a * c).sum(-1))
            ang1 = np.arctan2(b[:, 0] * d[:, 1] - b[:, 1] * d[:, 0], (b * d).sum(-1))
            if ok.any():
                worst["scale_angle"] = max(worst["scale_angle"], float(np.abs(ang0 - ang1)[ok].max()))

            body = random_pose(rng, frames=int(rng.integers(1, 9)), keypoints=27)
            shifted = body.replace(data=body.data * np.float32(rng.uniform(0.2, 5.0))
                                   + rng.uniform(-2, 2, size=2).astype(np.float32))
            base = T.center_and_scale_normalize(body, (5, 6)).data
            moved = T.center_and_scale_normalize(shifted, (5, 6)).data
            worst["normalize"] = max(worst["normalize"], float(np.abs(base - moved).max()))

        cases = 0
        for frames in range(1, 10):
            for mask in itertools.product([False, True], repeat=frames):
                if not any(mask):
                    continue
                data = rng.normal(size=(frames, 2, 2))
                valid = np.array([mask, mask[::-1]]).T
                if not valid[:, 1].any():
                    valid[0, 1] = True
                pose = PoseSequence(data, valid)
                assert np.array_equal(T.interpolate_missing(pose).data, interpolation_oracle(pose.data, pose.valid))
                cases += 1
        elapsed = time.monotonic() - start
        detail += [f"rotation {worst['rotation']:.1e}", f"scale angle {worst['scale_angle']:.1e}",
                   f"normalize {worst['normalize']:.1e}", f"{cases} interpolation cases"]
        assert worst["rotation"] <= 1e-5
        assert worst["scale_angle"] <= 1e-5
        assert worst["normalize"] <= 1e-4
        assert cases >= 1000
        assert elapsed <= 60


@pytest.mark.slow
def test_gradient_checks():
    with criterion(2, "finite-difference gradient checks, 100 coordinates per architecture") as detail:
        start = time.monotonic()
        for variant in ("lstm", "transformer", "stgcn"):
            torch.manual_seed(0)
            model = init_parameters(toy_config(variant, num_keypoints=27), seed=1).double()
            x = torch.randn(2, 12, 27, 2, dtype=torch.float64)
            lengths, y = torch.tensor([12, 9]), torch.tensor([0, 2])

            def loss_fn(m):
                return torch.nn.functional.cross_entropy(m(x, lengths), y)

            checks = check_gradients(model, loss_fn, 100, eps=1e-3, zero_tol=1e-9)
            worst = max(c.rel_error for c in checks)
            detail.append(f"{variant} worst {worst:.1e}")
            assert len(checks) >= 100
            assert worst <= 1e-2, variant
        assert time.monotonic() - start <= 300


def brute_force_infonce(pred, pos, negs):
    """-log softmax of the positive score, evaluated with 50-digit decimals from the exact float inputs."""
    with decimal.localcontext() as ctx:
        ctx.prec = 50
        p = [Decimal(float(v)) for v in pred]
        scores = [sum((a * Decimal(float(b)) for a, b in zip(p, row)), Decimal(0)) for row in [pos, *negs]]
        total = sum((s.exp() for s in scores), Decimal(0))
        return float(total.ln() - scores[0])


def test_infonce_oracle():
    rng = np.random.default_rng(7)
    with criterion(3, "InfoNCE against brute-force softmax cross-entropy") as detail:
        worst = 0.0
        for _ in range(1000):
            d, n = int(rng.integers(1, 9)), int(rng.integers(1, 8))
            pred = rng.normal(size=d) * rng.uniform(0.1, 4)
            pos = rng.normal(size=d)
            negs = rng.normal(size=(n, d))
            got = float(infonce_loss(torch.from_numpy(pred[None]), torch.from_numpy(pos[None]),
                                     torch.from_numpy(negs[None])))
            want = brute_force_infonce(pred, pos, negs)
            worst = max(worst, abs(got - want) / abs(want))
        # without negatives the softmax has one entry and the loss is exactly zero
        assert float(infonce_loss(torch.ones(1, 3), torch.ones(1, 3))) == 0.0
        hand = float(infonce_loss(torch.tensor([[1.0, 0.0]]), torch.tensor([[1.0, 0.0]]),
                                  torch.tensor([[[0.0, 1.0]]])))
        detail += [f"worst rel {worst:.1e}", f"hand example {hand:.6f}"]
        assert worst <= 1e-6
        assert abs(hand - (-math.log(math.e / (math.e + 1)))) <= 1e-4
        assert abs(hand - 0.3133) <= 1e-4


OVERFIT_SETUPS = {
    "lstm": (ModelConfig("lstm", 5, lstm=LSTMConfig(layers=2, hidden=32, attention_dim=32)), 32, 5e-3),
    "transformer": (ModelConfig("transformer", 5, transformer=TransformerConfig(layers=2, heads=4, hidden=32,
                                                                                ffn=64, max_seq=128)), 16, 1e-3),
    "stgcn": (ModelConfig("stgcn", 5, stgcn=STGCNConfig(channels=(16, 16, 32, 32), strides=(1, 2, 1, 2))), 32, 1e-3),
}


@pytest.fixture(scope="module")
def overfit_corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("overfit") / "syn.h5"
    make_synthetic_corpus(path, SyntheticSpec(num_classes=5, samples_per_class=20, frames=80))
    with Corpus(path) as c:
        yield c


@pytest.mark.slow
def test_overfit_sanity(overfit_corpus):
    with criterion(4, "each architecture fits the 5-class synthetic corpus") as detail:
        start = time.monotonic()
        failures = []
        for variant, (model, batch, lr) in OVERFIT_SETUPS.items():
            cfg = TrainConfig(model=model, batch_size=batch, learning_rate=lr, max_epochs=200, patience=40,
                              train_transforms=NORM, eval_transforms=NORM, topk=(1,))
            result = train_classifier(cfg, overfit_corpus, "train", "val")
            train_acc = evaluate(result.model, overfit_corpus, "train", ks=(1,), transforms=NORM).top1
            test_acc = evaluate(result.model, overfit_corpus, "test", ks=(1,), transforms=NORM).top1
            detail.append(f"{variant} train {train_acc:.2f} held-out {test_acc:.2f} "
                          f"(epoch {result.best_epoch}/{len(result.history)})")
            if train_acc < 0.95 or test_acc < 0.8:
                failures.append(variant)
        elapsed = time.monotonic() - start
        detail.append(f"{elapsed / 60:.1f} min")
        assert not failures, failures
        assert elapsed <= 20 * 60


# ------------------------------------------------------------------ low-resource protocol

# a harder corpus than the overfit one: twice the classes, wider rotation and tempo spread
LOW_RESOURCE_MOTION = {"num_classes": 10, "max_rotation": 0.4, "tempo_range": (0.6, 1.4)}
LOW_RESOURCE_SEEDS = range(5)
SAMPLES_PER_CLASS = 3
FINETUNE_EPOCHS = 40


@pytest.fixture(scope="module")
def low_resource_corpora(tmp_path_factory):
    root = tmp_path_factory.mktemp("lowres")
    make_synthetic_corpus(root / "unlabeled.h5", SyntheticSpec(samples_per_class=50, frames=120, labeled=False,
                                                               seed=7, **LOW_RESOURCE_MOTION))
    make_synthetic_corpus(root / "labeled.h5", SyntheticSpec(
        samples_per_class=30, frames=80, seed=11,
        split_fractions=(("train", 1 / 3), ("val", 1 / 3), ("test", 1 / 3)), **LOW_RESOURCE_MOTION))
    with Corpus(root / "unlabeled.h5") as unlabeled, Corpus(root / "labeled.h5") as labeled:
        assert len(unlabeled) == 500
        yield unlabeled, labeled


def compare_low_resource(labeled, model, encoder, batch_size, learning_rate):
    """Test top-1 from scratch and from ``encoder`` at 3 samples/class, one pair per seed."""
    pairs = []
    for seed in LOW_RESOURCE_SEEDS:
        ids = subset_by_samples_per_class(labeled, SubsetSpec(SAMPLES_PER_CLASS, seed), "train")
        cfg = TrainConfig(model=model, batch_size=batch_size, learning_rate=learning_rate,
                          max_epochs=FINETUNE_EPOCHS, patience=FINETUNE_EPOCHS, seed=seed,
                          train_transforms=NORM, eval_transforms=NORM, topk=(1,))
        scratch = train_classifier(cfg, labeled, ids, "val")
        tuned = train_classifier(cfg, labeled, ids, "val", initial_params=encoder)
        pairs.append((evaluate(scratch.model, labeled, "test", ks=(1,), transforms=NORM).top1,
                      evaluate(tuned.model, labeled, "test", ks=(1,), transforms=NORM).top1))
    return np.array(pairs)


LOW_RESOURCE_STGCN = STGCNConfig(channels=(16, 16, 32, 32), strides=(1, 2, 1, 2))


@pytest.mark.slow
def test_dpc_benefit(low_resource_corpora):
    unlabeled, labeled = low_resource_corpora
    with criterion(5, "DPC pretraining beats from-scratch at 3 samples/class") as detail:
        start = time.monotonic()
        pre = PretrainConfig(model=ModelConfig("stgcn", 2, stgcn=LOW_RESOURCE_STGCN), batch_size=32, steps=300,
                             min_clip_len=70, max_clip_len=120, transforms=NORM)
        # each clip keeps one random viewpoint throughout; rotating every window independently
        # stops the predictor from matching futures to their clip by orientation alone
        dpc = DpcConfig(window_augmentations=[{"name": "rotate", "params": {"max_angle": 0.6}}])
        result = dpc_pretrain(unlabeled, dpc, pre)
        losses = [h["loss"] for h in result.history]
        detail.append(f"DPC loss {np.mean(losses[:20]):.2f} -> {np.mean(losses[-20:]):.2f}")
        pairs = compare_low_resource(labeled, ModelConfig("stgcn", 10, stgcn=LOW_RESOURCE_STGCN),
                                     result.encoder, 32, 1e-3)
        scratch, tuned = pairs.mean(0)
        wins = int((pairs[:, 1] > pairs[:, 0]).sum())
        elapsed = time.monotonic() - start
        detail += [f"scratch {scratch:.3f}", f"DPC {tuned:.3f}", f"wins {wins}/5",
                   "per seed " + " ".join(f"{a:.2f}/{b:.2f}" for a, b in pairs), f"{elapsed / 60:.1f} min"]
        assert np.mean(losses[-20:]) < np.mean(losses[:20])
        assert tuned > scratch
        assert wins >= 4
        assert elapsed <= 3600


LOW_RESOURCE_TRANSFORMER = TransformerConfig(layers=2, heads=4, hidden=32, ffn=64, max_seq=128)


@pytest.mark.slow
def test_masked_pretraining_null_effect(low_resource_corpora):
    unlabeled, labeled = low_resource_corpora
    with criterion(6, "masked pretraining within 2 points of from-scratch; STATIC majority") as detail:
        poses = [unlabeled.get(i).pose for i in unlabeled.ids]
        statics = static_fraction(poses)
        detail.append(f"STATIC fraction {statics:.3f}")
        pre = PretrainConfig(model=ModelConfig("transformer", 2, transformer=LOW_RESOURCE_TRANSFORMER),
                             batch_size=32, steps=300, transforms=NORM)
        result = masked_pretrain(unlabeled, MaskConfig(mask_ratio=0.4), pre)
        losses = [h["loss"] for h in result.history]
        detail.append(f"masked loss {np.mean(losses[:20]):.3f} -> {np.mean(losses[-20:]):.3f}")
        pairs = compare_low_resource(labeled, ModelConfig("transformer", 10, transformer=LOW_RESOURCE_TRANSFORMER),
                                     result.encoder, 16, 1e-3)
        scratch, tuned = pairs.mean(0)
        detail += [f"scratch {scratch:.3f}", f"masked {tuned:.3f}",
                   "per seed " + " ".join(f"{a:.2f}/{b:.2f}" for a, b in pairs)]
        assert statics > 0.5
        assert np.mean(losses[-20:]) < np.mean(losses[:20])
        assert abs(tuned - scratch) <= 0.02


# ------------------------------------------------------------------ latency and streaming

@pytest.fixture(scope="module")
def benchmark_corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("bench") / "syn.h5"
    make_synthetic_corpus(path, SyntheticSpec(num_classes=5, samples_per_class=20, frames=80, seed=3))
    with Corpus(path) as c:
        yield c


def paced_client(port, pose, fps, results):
    """Send ``pose`` frame by frame on a fixed 1/fps schedule; collect every server message."""
    with socket.create_connection(("127.0.0.1", port)) as sock:
        reader = sock.makefile("r")
        messages = []
        listener = threading.Thread(target=lambda: messages.extend(json.loads(x) for x in reader), daemon=True)
        listener.start()
        sock.sendall((json.dumps({"type": "hello", "k": 27, "fps": fps, "format_version": 1}) + "\n").encode())
        start = time.monotonic()
        for i, frame in enumerate(frames_of(pose)):
            delay = start + i / fps - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            msg = {"type": "frame", "t": frame.t, "kps": frame.kps.tolist(), "valid": frame.valid.tolist()}
            sock.sendall((json.dumps(msg) + "\n").encode())
        results["send_seconds"] = time.monotonic() - start
        sock.shutdown(socket.SHUT_WR)
        listener.join(60)
        results["messages"] = messages


@pytest.mark.slow
def test_latency_ordering_and_realtime_serve(benchmark_corpus):
    with criterion(7, "paper-scale latency ordering and 30 fps stream without drops") as detail:
        models = {v: init_parameters(ModelConfig(v, 5), seed=0) for v in ("lstm", "transformer", "stgcn")}
        means = {}
        for variant, model in models.items():
            report = benchmark_latency(model, benchmark_corpus, "test", repetitions=3,
                                       selection=default_selection())
            means[variant] = report.mean
        detail.append(" ".join(f"{v} {m:.1f}ms" for v, m in means.items()))
        assert means["lstm"] < means["transformer"]
        assert means["lstm"] < means["stgcn"]

        clip = np.concatenate([benchmark_corpus.get(i).pose.data for i in benchmark_corpus.ids[:23]])[:1800]
        pose = PoseSequence.from_array(clip, fps=30.0)
        server = StreamServer(("127.0.0.1", 0), models["lstm"], benchmark_corpus.vocabulary,
                              StreamConfig(window_len=60, stride=30, queue_depth=4, k=5),
                              selection=default_selection())
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        results = {}
        try:
            paced_client(server.port, pose, 30.0, results)
        finally:
            server.shutdown()
            server.server_close()
        messages = results["messages"]
        preds = [m for m in messages if m["type"] == "prediction"]
        bye = messages[-1]
        worst = max(p["latency_ms"] for p in preds)
        detail += [f"{len(pose.data)} frames in {results['send_seconds']:.1f}s", f"{len(preds)} predictions",
                   f"dropped {bye.get('dropped')}", f"worst window latency {worst:.1f}ms"]
        assert bye == {"type": "bye", "windows": 59, "dropped": 0}
        assert [p["window_id"] for p in preds] == list(range(59))
        assert results["send_seconds"] >= 59.9


def test_storage_and_stream_equivalence(tmp_path):
    rng = np.random.default_rng(99)
    with criterion(8, "pack/get bit-exact in both layouts; stream logits equal batch logits") as detail:
        samples = []
        for i in range(100):
            pose = random_pose(rng, frames=int(rng.integers(1, 40)), keypoints=27, missing=0.2,
                               fps=float(rng.choice([25.0, 30.0])))
            label = int(rng.integers(0, 4))
            samples.append(LabeledSample(pose, label, f"g{label}", f"id{i:03d}", f"signer{i % 7}"))
        for target in (tmp_path / "c.h5", tmp_path / "c_bin"):
            pack(samples, target, vocabulary=["g0", "g1", "g2", "g3"])
            with Corpus(target) as corpus:
                for s in samples:
                    got = corpus.get(s.id)
                    assert got.pose.data.dtype == np.float32
                    assert np.array_equal(got.pose.data, s.pose.data) and got.pose.data.tobytes() == s.pose.data.tobytes()
                    assert np.array_equal(got.pose.valid, s.pose.valid)
                    assert (got.pose.fps, got.label, got.gloss, got.id, got.signer) == \
                        (s.pose.fps, s.label, s.gloss, s.id, s.signer)
        detail.append("100 samples x 2 layouts")

        model = init_parameters(ModelConfig("lstm", 4, lstm=LSTMConfig(layers=2, hidden=16, attention_dim=16)), seed=2)
        model.eval()
        cfg = StreamConfig(window_len=30, stride=15, queue_depth=1000, k=2, emit_logits=True)
        vocab = ["g0", "g1", "g2", "g3"]
        compared = 0
        for clip in range(10):
            pose = PoseSequence.from_array(
                (0.5 + 0.1 * rng.normal(size=(75, 27, 2))).astype(np.float32), fps=30.0)
            lines = [json.dumps({"type": "hello", "k": 27, "fps": 30, "format_version": 1})]
            lines += [json.dumps({"type": "frame", "t": f.t, "kps": f.kps.tolist(), "valid": f.valid.tolist()})
                      for f in frames_of(pose)]
            out = io.StringIO()
            serve_stdio(model, vocab, cfg, stdin=lines, stdout=out, selection=default_selection())
            preds = [json.loads(x) for x in out.getvalue().splitlines()]
            preds = [m for m in preds if m["type"] == "prediction"]
            assert len(preds) == 4
            for p in preds:
                start = 15 * p["window_id"]
                offline = predict_window(model, pose.frames(slice(start, start + 30)), vocab, 2,
                                         selection=default_selection())
                streamed = np.array(p["logits"], dtype=np.float32)
                assert streamed.tobytes() == offline.logits.astype(np.float32).tobytes()
                compared += 1
        detail.append(f"{compared} windows from 10 clips bitwise equal")
