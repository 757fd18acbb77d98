"""Normalizations and augmentations over :class:`PoseSequence`.

Every augmentation draws its parameters once per clip from a
:class:`RandomSource` and touches only valid keypoints; validity flags pass
through unchanged except in :func:`interpolate_missing`. The deterministic
``apply_*`` helpers take the drawn parameter explicitly.
"""

from __future__ import annotations

import inspect
import math
from dataclasses import dataclass, field

import numpy as np

from .pose import KeypointSelection, PoseSequence, default_selection
from .rng import RandomSource

DEFAULT_SHEAR = 0.15
DEFAULT_ROTATION = math.pi / 3
DEFAULT_SCALE = (0.8, 1.2)


def _map_valid(pose: PoseSequence, new_xy: np.ndarray) -> PoseSequence:
    data = np.where(pose.valid[..., None], new_xy, pose.data).astype(np.float32)
    return pose.replace(data=data)


def _linear(pose: PoseSequence, matrix) -> PoseSequence:
    xy = pose.data.astype(np.float64)
    return _map_valid(pose, xy @ np.asarray(matrix, dtype=np.float64).T)


def dimension_normalize(pose: PoseSequence, width: float, height: float) -> PoseSequence:
    if width <= 0 or height <= 0:
        raise ValueError(f"frame dimensions must be positive, got {width}x{height}")
    xy = pose.data.astype(np.float64) / np.array([width, height])
    return _map_valid(pose, xy)


def _shoulder_pair(sel) -> tuple[int, int]:
    if isinstance(sel, KeypointSelection):
        return sel.shoulders
    left, right = sel
    return int(left), int(right)


def center_and_scale_normalize(
    pose: PoseSequence, sel: KeypointSelection | tuple[int, int], reference_span: float = 1.0
) -> PoseSequence:
    """Center the mean shoulder midpoint at the origin and rescale the mean shoulder span."""
    if reference_span <= 0:
        raise ValueError(f"reference_span must be positive, got {reference_span}")
    left, right = _shoulder_pair(sel)
    both = pose.valid[:, left] & pose.valid[:, right]
    if not both.any():
        raise ValueError("shoulders are never simultaneously valid")
    xy = pose.data.astype(np.float64)
    l, r = xy[both, left], xy[both, right]
    span = float(np.linalg.norm(l - r, axis=1).mean())
    if span <= 0.0:
        raise ValueError("degenerate pose: mean shoulder span is zero")
    center = ((l + r) / 2.0).mean(axis=0)
    return _map_valid(pose, (xy - center) * (reference_span / span))


def interpolate_missing(pose: PoseSequence) -> PoseSequence:
    """Fill invalid frames per keypoint by linear interpolation, nearest-copy at the ends."""
    valid = pose.valid
    dead = ~valid.any(axis=0)
    if dead.any():
        raise ValueError(f"keypoint {int(np.argmax(dead))} has no valid frame to interpolate from")
    n = pose.num_frames
    t = np.arange(n)[:, None]
    # nearest valid frame at or before / at or after each frame, per keypoint
    left = np.maximum.accumulate(np.where(valid, t, -1), axis=0)
    right = np.minimum.accumulate(np.where(valid, t, n)[::-1], axis=0)[::-1]
    left = np.where(left < 0, right, left)
    right = np.where(right >= n, left, right)
    xy = pose.data.astype(np.float64)
    k = np.arange(pose.num_keypoints)[None, :]
    v_left, v_right = xy[left, k], xy[right, k]
    gap = (right - left).astype(np.float64)
    w = np.divide(t - left, gap, out=np.zeros_like(gap), where=gap > 0)[..., None]
    out = v_left + w * (v_right - v_left)
    return PoseSequence(out.astype(np.float32), np.ones_like(valid), pose.fps)


def apply_shear(pose: PoseSequence, s_x: float) -> PoseSequence:
    return _linear(pose, [[1.0, s_x], [0.0, 1.0]])


def apply_rotation(pose: PoseSequence, theta: float) -> PoseSequence:
    c, s = math.cos(theta), math.sin(theta)
    return _linear(pose, [[c, -s], [s, c]])


def apply_scale(pose: PoseSequence, factor: float) -> PoseSequence:
    return _map_valid(pose, pose.data.astype(np.float64) * factor)


def apply_shift(pose: PoseSequence, offset: int) -> PoseSequence:
    """Circularly move frame ``t`` to position ``(t + offset) mod F``."""
    return pose.replace(
        data=np.roll(pose.data, offset, axis=0), valid=np.roll(pose.valid, offset, axis=0)
    )


def shear(pose: PoseSequence, rng: RandomSource, s_max: float = DEFAULT_SHEAR) -> PoseSequence:
    if s_max < 0:
        raise ValueError("s_max must be non-negative")
    return apply_shear(pose, rng.uniform(-s_max, s_max))


def rotate(pose: PoseSequence, rng: RandomSource, max_angle: float = DEFAULT_ROTATION) -> PoseSequence:
    if not 0 <= max_angle <= math.pi:
        raise ValueError(f"max_angle must be in [0, pi], got {max_angle}")
    return apply_rotation(pose, rng.uniform(-max_angle, max_angle))


def scale(pose: PoseSequence, rng: RandomSource, lo: float = DEFAULT_SCALE[0], hi: float = DEFAULT_SCALE[1]) -> PoseSequence:
    if not 0 < lo <= hi:
        raise ValueError(f"scale range must satisfy 0 < lo <= hi, got ({lo}, {hi})")
    factor = lo if lo == hi else rng.uniform(lo, hi)
    return apply_scale(pose, factor)


def random_shift(pose: PoseSequence, rng: RandomSource, shift_max_fraction: float = 0.3) -> PoseSequence:
    if not 0 <= shift_max_fraction < 1:
        raise ValueError(f"shift_max_fraction must be in [0, 1), got {shift_max_fraction}")
    max_offset = math.floor(pose.num_frames * shift_max_fraction)
    return apply_shift(pose, rng.integer(0, max_offset))


def uniform_indices(num_frames: int, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError(f"target frame count must be >= 1, got {n}")
    if num_frames <= n:
        return np.arange(num_frames)
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    # round-half-to-even over the endpoint-inclusive linspace
    return np.round(np.arange(n) * (num_frames - 1) / (n - 1)).astype(np.int64)


def uniform_temporal_subsample(pose: PoseSequence, n: int) -> PoseSequence:
    idx = uniform_indices(pose.num_frames, n)
    if len(idx) == pose.num_frames:
        return pose
    return pose.frames(idx)


def temporal_window(pose: PoseSequence, start: int, n: int) -> PoseSequence:
    if not 0 <= start <= pose.num_frames - n:
        raise ValueError(f"window [{start}, {start + n}) does not fit in {pose.num_frames} frames")
    return pose.frames(slice(start, start + n))


def random_temporal_subsample(pose: PoseSequence, rng: RandomSource, n: int) -> PoseSequence:
    if n < 1:
        raise ValueError(f"target frame count must be >= 1, got {n}")
    if pose.num_frames <= n:
        return pose
    return temporal_window(pose, rng.integer(0, pose.num_frames - n), n)


# Pipeline steps. Random steps accept a fixed parameter (angle, s_x, factor,
# offset, start) in place of their range, in which case nothing is drawn.

def _step_shear(pose, rng, s_max=DEFAULT_SHEAR, s_x=None):
    return apply_shear(pose, s_x) if s_x is not None else shear(pose, rng, s_max)


def _step_rotate(pose, rng, max_angle=DEFAULT_ROTATION, angle=None):
    return apply_rotation(pose, angle) if angle is not None else rotate(pose, rng, max_angle)


def _step_scale(pose, rng, lo=DEFAULT_SCALE[0], hi=DEFAULT_SCALE[1], factor=None):
    return apply_scale(pose, factor) if factor is not None else scale(pose, rng, lo, hi)


def _step_shift(pose, rng, shift_max_fraction=0.3, offset=None):
    return apply_shift(pose, offset) if offset is not None else random_shift(pose, rng, shift_max_fraction)


def _step_random_subsample(pose, rng, n, start=None):
    if start is not None and pose.num_frames > n:
        return temporal_window(pose, start, n)
    return random_temporal_subsample(pose, rng, n)


def _step_center_scale(pose, rng, reference_span=1.0, shoulders=None, selection=None):
    pair = shoulders if shoulders is not None else (selection or default_selection()).shoulders
    return center_and_scale_normalize(pose, tuple(pair), reference_span)


STEPS = {
    "dimension_normalize": lambda pose, rng, width, height: dimension_normalize(pose, width, height),
    "center_and_scale_normalize": _step_center_scale,
    "interpolate_missing": lambda pose, rng: interpolate_missing(pose),
    "shear": _step_shear,
    "rotate": _step_rotate,
    "scale": _step_scale,
    "random_shift": _step_shift,
    "uniform_temporal_subsample": lambda pose, rng, n: uniform_temporal_subsample(pose, n),
    "random_temporal_subsample": _step_random_subsample,
}


@dataclass(frozen=True)
class TransformStep:
    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in STEPS:
            raise ValueError(f"unknown transform {self.name!r}; known: {sorted(STEPS)}")
        accepted = set(inspect.signature(STEPS[self.name]).parameters) - {"pose", "rng", "selection"}
        unknown = set(self.params) - accepted
        if unknown:
            raise ValueError(f"transform {self.name!r} got unknown parameter(s) {sorted(unknown)}")
        p = self.params
        if p.get("max_angle", 0) > math.pi or p.get("max_angle", 0) < 0:
            raise ValueError("max_angle must be in [0, pi]")
        if "lo" in p or "hi" in p:
            lo, hi = p.get("lo", DEFAULT_SCALE[0]), p.get("hi", DEFAULT_SCALE[1])
            if not 0 < lo <= hi:
                raise ValueError(f"scale range must satisfy 0 < lo <= hi, got ({lo}, {hi})")
        if p.get("s_max", 0) < 0:
            raise ValueError("s_max must be non-negative")
        if "n" in p and int(p["n"]) < 1:
            raise ValueError("target frame count must be >= 1")
        if p.get("reference_span", 1.0) <= 0:
            raise ValueError("reference_span must be positive")
        if not 0 <= p.get("shift_max_fraction", 0) < 1:
            raise ValueError("shift_max_fraction must be in [0, 1)")

    @classmethod
    def parse(cls, entry) -> "TransformStep":
        if isinstance(entry, TransformStep):
            return entry
        if isinstance(entry, str):
            return cls(entry)
        extra = set(entry) - {"name", "params"}
        if extra:
            raise ValueError(f"transform entry has unknown key(s) {sorted(extra)}")
        return cls(entry["name"], dict(entry.get("params") or {}))

    def to_dict(self) -> dict:
        return {"name": self.name, "params": dict(self.params)}

    def __call__(self, pose, rng, selection=None):
        fn = STEPS[self.name]
        kwargs = dict(self.params)
        if self.name == "center_and_scale_normalize":
            kwargs["selection"] = selection
        return fn(pose, rng, **kwargs)


def parse_pipeline(entries) -> list[TransformStep]:
    return [TransformStep.parse(e) for e in entries or []]


def compose(pipeline, pose: PoseSequence, rng: RandomSource, selection: KeypointSelection | None = None) -> PoseSequence:
    steps = parse_pipeline(pipeline)
    if not steps:
        raise ValueError("transform pipeline is empty")
    for step in steps:
        pose = step(pose, rng, selection)
    return pose
