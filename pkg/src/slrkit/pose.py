"""Pose data model, keypoint selection and the skeleton graph."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

KEYPOINT_MAP_FORMAT_VERSION = 1
DEFAULT_KEYPOINT_MAP = "mediapipe_holistic_27"


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class PoseSequence:
    """A clip of 2-D keypoints.

    ``data`` is float32 of shape (F, K, 2), ``valid`` is bool of shape (F, K).
    Undetected keypoints are stored as (0, 0) with ``valid`` false.
    """

    data: np.ndarray
    valid: np.ndarray
    fps: float = 30.0

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[2] != 2:
            raise ValueError(f"pose data must have shape (F, K, 2), got {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"pose needs at least one frame and one keypoint, got {data.shape}")
        valid = np.array(self.valid, dtype=bool)
        if valid.shape != data.shape[:2]:
            raise ValueError(f"valid mask shape {valid.shape} does not match data {data.shape[:2]}")
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        data[~valid] = 0.0
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "valid", _frozen(valid))
        object.__setattr__(self, "fps", float(self.fps))

    @classmethod
    def from_array(cls, data, fps: float = 30.0) -> "PoseSequence":
        """Wrap a fully detected clip."""
        data = np.asarray(data, dtype=np.float32)
        return cls(data, np.ones(data.shape[:2], dtype=bool), fps)

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def num_keypoints(self) -> int:
        return self.data.shape[1]

    def replace(self, data=None, valid=None) -> "PoseSequence":
        return PoseSequence(
            self.data if data is None else data,
            self.valid if valid is None else valid,
            self.fps,
        )

    def frames(self, index) -> "PoseSequence":
        """Sub-clip selected by a frame slice or index array."""
        return PoseSequence(self.data[index], self.valid[index], self.fps)

    def equals(self, other: "PoseSequence") -> bool:
        """Bitwise equality of data, flags and fps."""
        return (
            self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
            and np.array_equal(self.valid, other.valid)
            and self.fps == other.fps
        )


@dataclass(frozen=True)
class LabeledSample:
    pose: PoseSequence
    label: int | None = None
    gloss: str = ""
    id: str = ""
    signer: str = ""


@dataclass(frozen=True)
class KeypointSelection:
    indices: tuple[int, ...]
    names: tuple[str, ...]
    shoulder_left: int
    shoulder_right: int
    id: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("keypoint indices must be unique")
        if any(i < 0 for i in self.indices):
            raise ValueError("keypoint indices must be non-negative")
        if len(self.names) != len(self.indices):
            raise ValueError(
                f"{len(self.names)} names given for {len(self.indices)} keypoint indices"
            )
        for which in ("shoulder_left", "shoulder_right"):
            position = getattr(self, which)
            if not 0 <= position < len(self.indices):
                raise ValueError(f"{which}={position} is outside the selected set")
        if self.shoulder_left == self.shoulder_right:
            raise ValueError("shoulder keypoints must be distinct")

    @classmethod
    def identity(cls, num_keypoints: int, shoulder_left: int = 0, shoulder_right: int = 1):
        names = [f"kp{i}" for i in range(num_keypoints)]
        return cls(tuple(range(num_keypoints)), tuple(names), shoulder_left, shoulder_right, "identity")

    @property
    def shoulders(self) -> tuple[int, int]:
        return self.shoulder_left, self.shoulder_right


@dataclass(frozen=True, eq=False)
class SkeletonGraph:
    node_count: int
    edges: tuple[tuple[int, int], ...]
    adjacency_normalized: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        edges = _check_edges(self.node_count, self.edges)
        object.__setattr__(self, "edges", edges)
        if self.adjacency_normalized is None:
            object.__setattr__(self, "adjacency_normalized", _frozen(build_adjacency(self)))

    def permuted(self, order) -> "SkeletonGraph":
        """Graph with node ``order[i]`` relabelled as node ``i``."""
        order = np.asarray(order)
        inverse = np.argsort(order)
        edges = tuple((int(inverse[a]), int(inverse[b])) for a, b in self.edges)
        return SkeletonGraph(self.node_count, edges)


def _check_edges(node_count: int, edges) -> tuple[tuple[int, int], ...]:
    if node_count < 1:
        raise ValueError(f"graph needs at least one node, got {node_count}")
    seen = set()
    out = []
    for edge in edges:
        if len(edge) != 2:
            raise ValueError(f"malformed edge {edge!r}")
        a, b = int(edge[0]), int(edge[1])
        if not (0 <= a < node_count and 0 <= b < node_count):
            raise ValueError(f"edge {edge!r} references a node outside [0, {node_count})")
        if a == b:
            raise ValueError(f"self-loop {edge!r} in edge list")
        key = (min(a, b), max(a, b))
        if key in seen:
            raise ValueError(f"duplicate edge {edge!r}")
        seen.add(key)
        out.append((a, b))
    return tuple(out)


def build_adjacency(graph: SkeletonGraph) -> np.ndarray:
    """Symmetrically normalized adjacency with self-loops, D^-1/2 (A + I) D^-1/2."""
    n = graph.node_count
    edges = _check_edges(n, graph.edges)
    a = np.eye(n, dtype=np.float64)
    for i, j in edges:
        a[i, j] = a[j, i] = 1.0
    d_inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    out = a * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]
    # entrywise symmetry must be exact, not just up to rounding
    out = np.triu(out) + np.triu(out, 1).T
    return out.astype(np.float32)


def select_keypoints(full: PoseSequence, sel: KeypointSelection) -> PoseSequence:
    for i in sel.indices:
        if i >= full.num_keypoints:
            raise IndexError(
                f"keypoint index {i} out of range for a pose with {full.num_keypoints} keypoints"
            )
    idx = list(sel.indices)
    return PoseSequence(full.data[:, idx], full.valid[:, idx], full.fps)


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str = ""
    missing_fraction: float = 0.0

    def __bool__(self):
        return self.accepted


def validate_sequence(pose: PoseSequence, max_missing_fraction: float) -> Verdict:
    if not 0.0 <= max_missing_fraction <= 1.0:
        raise ValueError(f"max_missing_fraction must be in [0, 1], got {max_missing_fraction}")
    missing = 1.0 - float(pose.valid.mean())
    if not np.isfinite(pose.data[pose.valid]).all():
        return Verdict(False, "non-finite coordinate in a valid slot", missing)
    if missing > max_missing_fraction:
        return Verdict(
            False, f"{missing:.3f} of keypoint slots missing (limit {max_missing_fraction})", missing
        )
    return Verdict(True, "", missing)


def load_keypoint_map(path: str | Path | None = None) -> tuple[KeypointSelection, SkeletonGraph]:
    """Read an index map + edge list document; the bundled 27-point map by default."""
    if path is None:
        text = resources.files("slrkit.data").joinpath(f"{DEFAULT_KEYPOINT_MAP}.yaml").read_text()
    else:
        text = Path(path).read_text()
    doc = yaml.safe_load(text)
    version = doc.get("format_version")
    if version != KEYPOINT_MAP_FORMAT_VERSION:
        raise ValueError(f"unsupported keypoint map format_version {version!r}")
    sel = KeypointSelection(
        indices=tuple(doc["indices"]),
        names=tuple(doc["names"]),
        shoulder_left=doc["shoulder_left"],
        shoulder_right=doc["shoulder_right"],
        id=doc.get("id", "custom"),
    )
    source = doc.get("source_keypoints")
    if source is not None and max(sel.indices) >= source:
        raise ValueError(f"index {max(sel.indices)} exceeds source keypoint count {source}")
    graph = SkeletonGraph(len(sel.indices), tuple(tuple(e) for e in doc["edges"]))
    return sel, graph


def default_selection() -> KeypointSelection:
    return load_keypoint_map()[0]


def default_graph() -> SkeletonGraph:
    return load_keypoint_map()[1]

