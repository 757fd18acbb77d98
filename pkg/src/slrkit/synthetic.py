"""Synthetic signing corpus: class-specific hand trajectories on the 27-point skeleton.

Each class moves the right (dominant) arm along its own drift direction with
its own oscillation frequency and ellipse shape. Every clip then gets a random
tempo, phase, body proportions, a per-clip affine jitter and small per-frame
keypoint noise. Every other keypoint stays at rest apart from that noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import CorpusManifest, pack
from .pose import LabeledSample, PoseSequence
from .rng import RandomSource

# rest pose in image-normalized coordinates (x right, y down), shoulder span 0.2
_BODY = {
    0: (0.50, 0.30), 1: (0.52, 0.28), 2: (0.48, 0.28), 3: (0.55, 0.29), 4: (0.45, 0.29),
    5: (0.60, 0.45), 6: (0.40, 0.45), 7: (0.64, 0.60), 8: (0.36, 0.60),
    9: (0.62, 0.74), 10: (0.38, 0.74),
}
# hand points relative to the hand wrist: thumb tip, index mcp/tip, middle mcp/tip, pinky mcp/tip
_HAND = np.array([(0.025, -0.020), (0.012, -0.030), (0.014, -0.055),
                  (0.000, -0.032), (0.000, -0.060), (-0.014, -0.028), (-0.016, -0.048)])
LEFT_HAND = 11
RIGHT_HAND = 19
# right elbow, right wrist and the right hand follow the class trajectory
MOVING = (8, 10) + tuple(range(RIGHT_HAND, RIGHT_HAND + 8))


def rest_pose() -> np.ndarray:
    pose = np.zeros((27, 2))
    for k, xy in _BODY.items():
        pose[k] = xy
    pose[LEFT_HAND] = pose[9]
    pose[LEFT_HAND + 1:LEFT_HAND + 8] = pose[9] + _HAND * [-1, 1]
    pose[RIGHT_HAND] = pose[10]
    pose[RIGHT_HAND + 1:RIGHT_HAND + 8] = pose[10] + _HAND
    return pose


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 5
    samples_per_class: int = 20
    frames: int = 80
    seed: int = 0
    fps: float = 30.0
    drift: float = 0.15
    oscillation: float = 0.03
    noise: float = 3e-4
    max_rotation: float = 0.15
    scale_range: tuple[float, float] = (0.85, 1.15)
    max_translation: float = 0.05
    tempo_range: tuple[float, float] = (0.8, 1.2)
    labeled: bool = True
    split_fractions: tuple[tuple[str, float], ...] = (("train", 0.6), ("val", 0.2), ("test", 0.2))

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("a synthetic corpus needs at least 2 classes")
        if self.samples_per_class < 1 or self.frames < 2:
            raise ValueError("need samples_per_class >= 1 and frames >= 2")
        if self.noise < 0 or self.drift <= 0:
            raise ValueError("noise must be >= 0 and drift > 0")
        if not 0 < self.scale_range[0] <= self.scale_range[1]:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        if not 0 < self.tempo_range[0] <= self.tempo_range[1]:
            raise ValueError("tempo_range must satisfy 0 < lo <= hi")
        if self.split_fractions and abs(sum(f for _, f in self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


def class_motion(label: int, num_classes: int) -> dict:
    """Drift direction, oscillation frequency (Hz) and ellipse aspect of one class."""
    return {
        "angle": 2 * math.pi * label / num_classes,
        "frequency": 0.6 + 1.2 * ((label * 3) % num_classes) / num_classes,
        "aspect": -1.0 + 2.0 * ((label * 7 + 1) % num_classes) / max(num_classes - 1, 1),
    }


def synthesize_clip(label: int, spec: SyntheticSpec, rng: RandomSource) -> PoseSequence:
    motion = class_motion(label, spec.num_classes)
    base = rest_pose()
    base = base + (base - base[[5, 6]].mean(0)) * (rng.uniform(-0.08, 0.08))
    tempo = rng.uniform(*spec.tempo_range)
    phase = rng.uniform(0, 2 * math.pi)
    t = np.arange(spec.frames) / spec.fps
    progress = np.clip(t * tempo / (spec.frames / spec.fps), 0, 1)
    ramp = (1 - np.cos(math.pi * progress)) / 2
    direction = np.array([math.cos(motion["angle"]), math.sin(motion["angle"])])
    arg = 2 * math.pi * motion["frequency"] * tempo * t + phase
    wiggle = np.stack([np.cos(arg), motion["aspect"] * np.sin(arg)], axis=1)
    offset = spec.drift * ramp[:, None] * direction + spec.oscillation * wiggle
    seq = np.repeat(base[None], spec.frames, axis=0)
    seq[:, 8] += 0.5 * offset
    for k in MOVING[1:]:
        seq[:, k] += offset

    theta = rng.uniform(-spec.max_rotation, spec.max_rotation)
    s = rng.uniform(*spec.scale_range)
    shift = np.array([rng.uniform(-spec.max_translation, spec.max_translation) for _ in range(2)])
    rot = s * np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    center = np.array([0.5, 0.5])
    seq = (seq - center) @ rot.T + center + shift
    if spec.noise > 0:
        seq = seq + rng.normal(seq.shape, spec.noise)
    return PoseSequence.from_array(seq.astype(np.float32), fps=spec.fps)


def synthesize(spec: SyntheticSpec) -> tuple[list[LabeledSample], dict[str, list[str]], list[str]]:
    """Samples, stratified splits and vocabulary, without writing anything."""
    root = RandomSource(spec.seed)
    vocabulary = [f"sign{c:02d}" for c in range(spec.num_classes)]
    samples, by_class = [], {c: [] for c in range(spec.num_classes)}
    for c in range(spec.num_classes):
        for i in range(spec.samples_per_class):
            sid = f"c{c:02d}_{i:04d}"
            pose = synthesize_clip(c, spec, root.child(sid))
            label = c if spec.labeled else None
            samples.append(LabeledSample(pose, label, vocabulary[c] if spec.labeled else "", sid, f"signer{i % 4}"))
            by_class[c].append(sid)
    splits: dict[str, list[str]] = {}
    if spec.labeled and spec.split_fractions:
        for name, _ in spec.split_fractions:
            splits[name] = []
        n = spec.samples_per_class
        bounds = np.round(np.cumsum([0.0] + [f for _, f in spec.split_fractions]) * n).astype(int)
        for c in range(spec.num_classes):
            for (name, _), lo, hi in zip(spec.split_fractions, bounds[:-1], bounds[1:]):
                splits[name].extend(by_class[c][lo:hi])
    return samples, splits, vocabulary if spec.labeled else []


def make_synthetic_corpus(destination: str | Path, spec: SyntheticSpec | None = None, **fields) -> CorpusManifest:
    """Generate and pack a synthetic corpus; ``fields`` override ``SyntheticSpec`` defaults."""
    spec = spec or SyntheticSpec(**fields)
    samples, splits, vocabulary = synthesize(spec)
    return pack(samples, destination, corpus_id=f"synthetic-{spec.seed}", vocabulary=vocabulary, splits=splits)


def mean_motion(pose: PoseSequence) -> np.ndarray:
    """Per-clip mean frame-to-frame displacement of every keypoint, flattened."""
    return np.diff(pose.data.astype(np.float64), axis=0).mean(axis=0).reshape(-1)


def nearest_centroid_accuracy(features: np.ndarray, labels: np.ndarray) -> float:
    """Leave-one-out nearest-centroid accuracy."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    sums = np.stack([features[labels == c].sum(0) for c in classes])
    counts = np.array([(labels == c).sum() for c in classes], dtype=np.float64)
    correct = 0
    for x, y in zip(features, labels):
        own = classes == y
        centroids = sums.copy()
        n = counts.copy()
        centroids[own] -= x
        n[own] -= 1
        usable = n > 0
        centroids = centroids[usable] / n[usable, None]
        d = ((centroids - x) ** 2).sum(1)
        correct += classes[usable][np.argmin(d)] == y
    return correct / len(labels)
