"""Sliding-window recognition over a live pose stream, plus a serial latency benchmark.

Wire protocol: one JSON object per line.

    client -> {"type": "hello", "k": 27, "fps": 30, "format_version": 1}
    client -> {"type": "frame", "t": 0, "kps": [[x, y], ...], "valid": [true, ...]}
    server -> {"type": "prediction", "window_id": 0, "top_k": [["GLOSS", 0.92], ...], "latency_ms": 3.1}
    (with emit_logits, a prediction also carries "logits": [...])
    server -> {"type": "error", "message": "..."}       (then the session closes)
    server -> {"type": "bye", "windows": n, "dropped": d}  (after end of input)
"""

from __future__ import annotations

import collections
import io
import json
import platform
import socketserver
import sys
import threading
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import Corpus
from .models import PoseClassifier, collate
from .pose import KeypointSelection, PoseSequence, default_selection
from .rng import RandomSource
from .transforms import compose
from .util import from_dict

PROTOCOL_VERSION = 1
DEFAULT_NORMALIZATION = ({"name": "center_and_scale_normalize"},)
WARMUP_RUNS = 5


class ProtocolError(ValueError):
    pass


@dataclass
class StreamConfig:
    window_len: int = 60
    stride: int = 30
    queue_depth: int = 4
    k: int = 5
    # add the raw logits to every prediction message (exact: JSON floats round-trip float32 values)
    emit_logits: bool = False

    def __post_init__(self):
        if self.window_len < 1 or self.stride < 1 or self.queue_depth < 1 or self.k < 1:
            raise ValueError("window_len, stride, queue_depth and k must all be >= 1")

    @classmethod
    def from_dict(cls, data) -> "StreamConfig":
        return from_dict(cls, data, "serve.window")


@dataclass(frozen=True)
class FrameMessage:
    t: int
    kps: np.ndarray
    valid: np.ndarray

    @classmethod
    def parse(cls, msg: dict, num_keypoints: int) -> "FrameMessage":
        if msg.get("type") != "frame":
            raise ProtocolError(f"expected a frame message, got type {msg.get('type')!r}")
        try:
            t = msg["t"]
            kps = np.asarray(msg["kps"], dtype=np.float32)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed frame: {exc}") from None
        if isinstance(t, bool) or not isinstance(t, int):
            raise ProtocolError("frame index t must be an integer")
        if kps.shape != (num_keypoints, 2):
            raise ProtocolError(f"frame {t}: kps must be {num_keypoints} [x, y] pairs, got shape {kps.shape}")
        valid = np.asarray(msg.get("valid", [True] * num_keypoints))
        if valid.shape != (num_keypoints,) or valid.dtype != bool:
            raise ProtocolError(f"frame {t}: valid must be {num_keypoints} booleans")
        if not np.isfinite(kps[valid]).all():
            raise ProtocolError(f"frame {t}: non-finite coordinates")
        return cls(t, kps, valid)


@dataclass
class Window:
    window_id: int
    first_t: int
    pose: PoseSequence
    ready_at: float = 0.0


class WindowQueue:
    """Bounded hand-off between assembler and predictor; overflow drops the oldest window."""

    def __init__(self, depth: int):
        self.depth = depth
        self.dropped = 0
        self._items: collections.deque = collections.deque()
        self._cond = threading.Condition()
        self._closed = False

    def put(self, item):
        with self._cond:
            if len(self._items) >= self.depth:
                self._items.popleft()
                self.dropped += 1
            self._items.append(item)
            self._cond.notify()

    def get(self, timeout: float | None = None):
        """Next item, or None once closed and drained."""
        with self._cond:
            while not self._items and not self._closed:
                if not self._cond.wait(timeout):
                    return None
            return self._items.popleft() if self._items else None

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def __len__(self):
        with self._cond:
            return len(self._items)


class WindowAssembler:
    """Turns frames into overlapping windows of ``window_len`` frames every ``stride`` frames."""

    def __init__(self, num_keypoints: int, window_len: int = 60, stride: int = 30, fps: float = 30.0):
        if window_len < 1 or stride < 1:
            raise ValueError("window_len and stride must be >= 1")
        self.num_keypoints = num_keypoints
        self.window_len = window_len
        self.stride = stride
        self.fps = fps
        self._frames: collections.deque = collections.deque(maxlen=window_len)
        self._since_emit = 0
        self._last_t = None
        self.emitted = 0

    def push(self, frame: FrameMessage) -> Window | None:
        if self._last_t is not None and frame.t <= self._last_t:
            raise ProtocolError(f"frame index {frame.t} does not increase (previous {self._last_t})")
        self._last_t = frame.t
        self._frames.append(frame)
        self._since_emit += 1
        due = self.window_len if self.emitted == 0 else self.stride
        if len(self._frames) < self.window_len or self._since_emit < due:
            return None
        self._since_emit = 0
        data = np.stack([f.kps for f in self._frames])
        valid = np.stack([f.valid for f in self._frames])
        window = Window(self.emitted, self._frames[0].t, PoseSequence(data, valid, self.fps), time.monotonic())
        self.emitted += 1
        return window


def window_assembler(frames, num_keypoints: int, window_len: int = 60, stride: int = 30, fps: float = 30.0):
    """Generator form of ``WindowAssembler`` over an iterable of frames."""
    assembler = WindowAssembler(num_keypoints, window_len, stride, fps)
    for frame in frames:
        window = assembler.push(frame)
        if window is not None:
            yield window


def frames_of(pose: PoseSequence, start_t: int = 0):
    for i in range(pose.num_frames):
        yield FrameMessage(start_t + i, pose.data[i], pose.valid[i])


@dataclass
class Prediction:
    window_id: int
    top_k: list[tuple[str, float]]
    latency_ms: float
    logits: np.ndarray = field(repr=False, default=None)

    def to_message(self) -> dict:
        return {
            "type": "prediction",
            "window_id": self.window_id,
            "top_k": [[label, score] for label, score in self.top_k],
            "latency_ms": self.latency_ms,
        }


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest scores, descending; equal scores keep the lower index first."""
    if k > len(scores):
        raise ValueError(f"k={k} exceeds the {len(scores)} classes")
    return np.argsort(-scores, kind="stable")[:k]


def _run(model: PoseClassifier, pose: PoseSequence, normalization, selection) -> torch.Tensor:
    if normalization:
        pose = compose(normalization, pose, RandomSource(0), selection)
    x, lengths = collate([pose])
    return model(x, lengths)[0]


def predict_window(model: PoseClassifier, window, vocabulary: list[str], k: int = 5,
                   normalization=DEFAULT_NORMALIZATION, selection: KeypointSelection | None = None,
                   window_id: int = 0) -> Prediction:
    """Normalize, classify and rank one window; latency covers normalization and forward only."""
    pose = window.pose if isinstance(window, Window) else window
    window_id = window.window_id if isinstance(window, Window) else window_id
    if pose.num_keypoints != model.config.num_keypoints:
        raise ValueError(f"window has {pose.num_keypoints} keypoints, model expects {model.config.num_keypoints}")
    num_classes = model.config.num_classes
    if k > num_classes:
        raise ValueError(f"k={k} exceeds the {num_classes} classes")
    start = time.perf_counter()
    with torch.no_grad():
        logits = _run(model, pose, normalization, selection)
    latency = (time.perf_counter() - start) * 1000.0
    z = logits.double().numpy()
    probs = np.exp(z - z.max())
    probs /= probs.sum()
    order = top_k(probs, k)
    labels = vocabulary if len(vocabulary) == num_classes else [f"class{i}" for i in range(num_classes)]
    return Prediction(window_id, [(labels[i], float(probs[i])) for i in order], latency, logits.numpy())


@dataclass
class LatencyReport:
    latencies_ms: list[float]
    mean: float
    p50: float
    p95: float
    min: float
    max: float
    warmup_runs: int
    model_id: str
    host: str

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def host_descriptor() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} torch-threads={torch.get_num_threads()}"


def benchmark_latency(model: PoseClassifier, corpus: Corpus, split, repetitions: int = 1,
                      warmup: int = WARMUP_RUNS, normalization=DEFAULT_NORMALIZATION,
                      selection: KeypointSelection | None = None, model_id: str = "") -> LatencyReport:
    """Serial batch-1 timing of normalization + forward per sample, after ``warmup`` discarded runs.

    Samples are loaded before timing starts, so storage reads are excluded.
    """
    ids = corpus.split(split) if isinstance(split, str) else list(split)
    if not ids:
        raise ValueError("latency benchmark needs a non-empty split")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    poses = [corpus.get(i).pose for i in ids]
    model.eval()
    times = []
    with torch.no_grad():
        for i in range(warmup):
            _run(model, poses[i % len(poses)], normalization, selection)
        for _ in range(repetitions):
            for pose in poses:
                start = time.perf_counter()
                _run(model, pose, normalization, selection)
                times.append((time.perf_counter() - start) * 1000.0)
    arr = np.array(times)
    return LatencyReport(
        times, float(arr.mean()), float(np.percentile(arr, 50)), float(np.percentile(arr, 95)),
        float(arr.min()), float(arr.max()), warmup, model_id or model.config_hash, host_descriptor(),
    )


# ---------------------------------------------------------------- sessions


@dataclass
class SessionStats:
    windows: int = 0
    dropped: int = 0
    predictions: int = 0
    window_ready: list[float] = field(default_factory=list)
    prediction_done: dict[int, float] = field(default_factory=dict)

    def late_predictions(self) -> int:
        """Predictions finished after the following window was already complete."""
        late = 0
        for wid, done in self.prediction_done.items():
            if wid + 1 < len(self.window_ready) and done > self.window_ready[wid + 1]:
                late += 1
        return late


class Session:
    """One client: handshake, then frames in and predictions out.

    The caller's thread runs the assembler (producer); a second thread runs
    the predictor (consumer); they meet at a drop-oldest ``WindowQueue``.
    """

    def __init__(self, model: PoseClassifier, vocabulary: list[str], config: StreamConfig, send,
                 selection: KeypointSelection | None = None, normalization=DEFAULT_NORMALIZATION):
        self.model = model
        self.vocabulary = vocabulary
        self.config = config
        self._send_raw = send
        self._send_lock = threading.Lock()
        self.selection = selection
        self.normalization = normalization
        self.stats = SessionStats()
        self.queue = WindowQueue(config.queue_depth)
        self.assembler: WindowAssembler | None = None
        self.error: str | None = None

    def send(self, message: dict):
        with self._send_lock:
            self._send_raw(message)

    def _consume(self):
        while True:
            window = self.queue.get()
            if window is None:
                return
            try:
                pred = predict_window(self.model, window, self.vocabulary, self.config.k,
                                      self.normalization, self.selection)
            except Exception as exc:  # reported to the client, session keeps its stats
                self.error = str(exc)
                self.send({"type": "error", "message": f"prediction failed: {exc}"})
                continue
            message = pred.to_message()
            if self.config.emit_logits:
                message["logits"] = pred.logits.tolist()
            self.send(message)
            self.stats.prediction_done[window.window_id] = time.monotonic()
            self.stats.predictions += 1

    def handshake(self, msg: dict):
        if msg.get("type") != "hello":
            raise ProtocolError("first message must be a hello handshake")
        if msg.get("format_version") != PROTOCOL_VERSION:
            raise ProtocolError(f"unsupported format_version {msg.get('format_version')!r}")
        k, fps = msg.get("k"), msg.get("fps", 30)
        if k != self.model.config.num_keypoints:
            raise ProtocolError(f"handshake declares k={k}, model expects {self.model.config.num_keypoints}")
        if not isinstance(fps, (int, float)) or fps <= 0:
            raise ProtocolError("fps must be a positive number")
        self.assembler = WindowAssembler(k, self.config.window_len, self.config.stride, float(fps))

    def feed(self, msg: dict):
        if self.assembler is None:
            self.handshake(msg)
            return
        window = self.assembler.push(FrameMessage.parse(msg, self.assembler.num_keypoints))
        if window is not None:
            self.stats.window_ready.append(window.ready_at)
            self.stats.windows += 1
            self.queue.put(window)

    def run(self, lines) -> SessionStats:
        """Process an iterable of JSON lines until it ends or a message is malformed."""
        consumer = threading.Thread(target=self._consume, daemon=True)
        consumer.start()
        try:
            for line in lines:
                if isinstance(line, bytes):
                    line = line.decode()
                if not line.strip():
                    continue
                try:
                    msg = json.loads(line)
                    if not isinstance(msg, dict):
                        raise ProtocolError("each line must be a JSON object")
                    self.feed(msg)
                except (ProtocolError, json.JSONDecodeError) as exc:
                    self.error = str(exc)
                    self.send({"type": "error", "message": str(exc)})
                    break
        finally:
            self.queue.close()
            consumer.join()
            self.stats.dropped = self.queue.dropped
        if self.error is None:
            self.send({"type": "bye", "windows": self.stats.windows, "dropped": self.stats.dropped})
        return self.stats


def _line_writer(stream):
    def send(message: dict):
        data = json.dumps(message) + "\n"
        if isinstance(stream, io.TextIOBase):
            stream.write(data)
        else:
            stream.write(data.encode())
        stream.flush()
    return send


def serve_stdio(model: PoseClassifier, vocabulary: list[str], config: StreamConfig,
                stdin=None, stdout=None, **session_kw) -> SessionStats:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    return Session(model, vocabulary, config, _line_writer(stdout), **session_kw).run(stdin)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        server = self.server
        session = Session(server.model, server.vocabulary, server.stream_config,
                          _line_writer(self.wfile), **server.session_kw)
        try:
            stats = session.run(self.rfile)
        except OSError:
            return
        with server.lock:
            server.sessions.append(stats)


class StreamServer(socketserver.ThreadingTCPServer):
    """TCP endpoint; each connection is an independent session sharing the frozen model."""

    allow_reuse_address = True
    daemon_threads = True
    block_on_close = True

    def __init__(self, address, model: PoseClassifier, vocabulary: list[str], config: StreamConfig, **session_kw):
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self.model = model
        self.vocabulary = vocabulary
        self.stream_config = config
        self.session_kw = session_kw
        self.sessions: list[SessionStats] = []
        self.lock = threading.Lock()
        super().__init__(address, _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]


def parse_endpoint(endpoint: str) -> tuple[str, int] | None:
    """``"stdio"`` -> None; ``"tcp://host:port"`` or ``"host:port"`` -> (host, port)."""
    if endpoint == "stdio":
        return None
    address = endpoint[len("tcp://"):] if endpoint.startswith("tcp://") else endpoint
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must be 'stdio' or 'tcp://host:port', got {endpoint!r}")
    return host or "127.0.0.1", int(port)


def default_stream_selection(model: PoseClassifier) -> KeypointSelection | None:
    return default_selection() if model.config.num_keypoints == 27 else None
