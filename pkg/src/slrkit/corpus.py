"""Randomly addressable pose corpora.

Two on-disk layouts carry the same logical model:

* ``hdf5`` (a ``.h5``/``.hdf5`` file): one group per sample named by its id,
  holding datasets ``pose`` (float32, F x K x 2) and ``valid`` (bool, F x K)
  and attributes ``fps``, ``label``, ``gloss``, ``signer``. The manifest JSON
  sits in the root attribute ``manifest``.
* ``binary`` (a directory): ``manifest.json`` plus ``samples/<n>.bin`` where
  each file is the little-endian float32 pose followed by one byte per
  validity flag.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .pose import LabeledSample, PoseSequence, validate_sequence
from .rng import RandomSource

MANIFEST_FORMAT_VERSION = 1
HDF5_SUFFIXES = (".h5", ".hdf5")


@dataclass
class SampleRecord:
    id: str
    frame_count: int
    label: int | None = None
    gloss: str = ""
    signer: str = ""
    locator: str = ""
    fps: float = 30.0


@dataclass
class CorpusManifest:
    corpus_id: str
    samples: list[SampleRecord]
    vocabulary: list[str] = field(default_factory=list)
    splits: dict[str, list[str]] = field(default_factory=dict)
    fps: float = 30.0
    num_keypoints: int = 27
    keypoint_map_id: str = "mediapipe_holistic_27"
    layout: str = "hdf5"
    format_version: int = MANIFEST_FORMAT_VERSION

    def __post_init__(self):
        self.samples = [s if isinstance(s, SampleRecord) else SampleRecord(**s) for s in self.samples]
        self.validate()

    @property
    def labeled(self) -> bool:
        return bool(self.samples) and self.samples[0].label is not None

    def validate(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids must be unique")
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise ValueError("vocabulary contains duplicate glosses")
        labeled = [s.label is not None for s in self.samples]
        if any(labeled) and not all(labeled):
            raise ValueError("either every sample carries a label or none does")
        for s in self.samples:
            if s.frame_count < 1:
                raise ValueError(f"sample {s.id!r} has no frames")
            if s.label is not None and not 0 <= s.label < len(self.vocabulary):
                raise ValueError(f"sample {s.id!r} label {s.label} outside vocabulary")
        known = set(ids)
        for name, members in self.splits.items():
            missing = [m for m in members if m not in known]
            if missing:
                raise ValueError(f"split {name!r} references unknown sample(s) {missing[:3]}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CorpusManifest":
        doc = json.loads(text)
        version = doc.get("format_version")
        if version != MANIFEST_FORMAT_VERSION:
            raise ValueError(f"unsupported manifest format_version {version!r}")
        return cls(**doc)


def _layout_for(path: Path) -> str:
    return "hdf5" if path.suffix.lower() in HDF5_SUFFIXES else "binary"


def _check_id(sample_id: str):
    if not sample_id or "/" in sample_id or sample_id in (".", ".."):
        raise ValueError(f"invalid sample id {sample_id!r}")


def _as_sample(item, position: int) -> LabeledSample:
    if isinstance(item, LabeledSample):
        sample = item
    else:
        pose, meta = item
        meta = dict(meta or {})
        sample = LabeledSample(
            pose, meta.get("label"), meta.get("gloss", ""), str(meta.get("id", "")), meta.get("signer", "")
        )
    if not sample.id:
        sample = LabeledSample(sample.pose, sample.label, sample.gloss, f"s{position:06d}", sample.signer)
    return sample


def pack(
    samples: Iterable,
    destination: str | Path,
    *,
    corpus_id: str | None = None,
    vocabulary: list[str] | None = None,
    splits: dict[str, list[str]] | None = None,
    keypoint_map_id: str = "mediapipe_holistic_27",
    max_missing_fraction: float = 1.0,
) -> CorpusManifest:
    """Write ``samples`` (LabeledSample or (pose, metadata) pairs) to ``destination``.

    The container is written to a temporary sibling and moved into place only
    once complete, so a failure never leaves a partial corpus behind.
    """
    destination = Path(destination)
    layout = _layout_for(destination)
    destination.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".pack-", dir=destination.parent))
    try:
        target = tmp / ("corpus" + destination.suffix if layout == "hdf5" else "corpus")
        manifest = _write(samples, target, layout, corpus_id or destination.stem, vocabulary,
                          splits, keypoint_map_id, max_missing_fraction)
        if destination.exists():
            if destination.is_dir():
                shutil.rmtree(destination)
            else:
                destination.unlink()
        os.replace(target, destination)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    return manifest


def _write(samples, target, layout, corpus_id, vocabulary, splits, keypoint_map_id, max_missing):
    records: list[SampleRecord] = []
    glosses: dict[int, str] = {}
    shape_k = None
    fps = None
    h5 = None
    if layout == "hdf5":
        import h5py

        h5 = h5py.File(target, "w")
    else:
        (target / "samples").mkdir(parents=True)
    try:
        for position, item in enumerate(samples):
            sample = _as_sample(item, position)
            _check_id(sample.id)
            pose = sample.pose
            verdict = validate_sequence(pose, max_missing)
            if not verdict:
                raise ValueError(f"sample {sample.id!r} rejected: {verdict.reason}")
            if shape_k is None:
                shape_k, fps = pose.num_keypoints, pose.fps
            elif pose.num_keypoints != shape_k:
                raise ValueError(
                    f"sample {sample.id!r} has K={pose.num_keypoints}, corpus has K={shape_k}"
                )
            if sample.label is not None:
                known = glosses.setdefault(int(sample.label), sample.gloss)
                if known != sample.gloss:
                    raise ValueError(f"label {sample.label} mapped to both {known!r} and {sample.gloss!r}")
            if h5 is not None:
                group = h5.create_group(sample.id)
                group.create_dataset("pose", data=pose.data)
                group.create_dataset("valid", data=pose.valid)
                group.attrs["fps"] = pose.fps
                group.attrs["label"] = -1 if sample.label is None else int(sample.label)
                group.attrs["gloss"] = sample.gloss
                group.attrs["signer"] = sample.signer
                locator = "/" + sample.id
            else:
                locator = f"samples/{position:06d}.bin"
                with open(target / locator, "wb") as fh:
                    fh.write(pose.data.astype("<f4").tobytes())
                    fh.write(pose.valid.astype(np.uint8).tobytes())
            records.append(SampleRecord(
                sample.id, pose.num_frames, None if sample.label is None else int(sample.label),
                sample.gloss, sample.signer, locator, pose.fps,
            ))
        if not records:
            raise ValueError("cannot pack an empty corpus")
        if vocabulary is None:
            vocabulary = [glosses.get(i, f"class{i}") for i in range(max(glosses) + 1)] if glosses else []
        manifest = CorpusManifest(
            corpus_id=corpus_id, samples=records, vocabulary=list(vocabulary), splits=dict(splits or {}),
            fps=fps, num_keypoints=shape_k, keypoint_map_id=keypoint_map_id, layout=layout,
        )
        if h5 is not None:
            h5.attrs["manifest"] = manifest.to_json()
        else:
            (target / "manifest.json").write_text(manifest.to_json())
        return manifest
    finally:
        if h5 is not None:
            h5.close()


class Corpus:
    """Read access to a packed corpus; ``get`` touches only the requested sample."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._h5 = None
        if not self.path.exists():
            raise FileNotFoundError(f"no corpus at {self.path}")
        if _layout_for(self.path) == "hdf5":
            import h5py

            self._h5 = h5py.File(self.path, "r")
            self.manifest = CorpusManifest.from_json(self._h5.attrs["manifest"])
        else:
            self.manifest = CorpusManifest.from_json((self.path / "manifest.json").read_text())
        self._by_id = {s.id: i for i, s in enumerate(self.manifest.samples)}

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self._h5 is not None:
            self._h5.close()
            self._h5 = None

    def __len__(self):
        return len(self.manifest.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.manifest.samples]

    @property
    def labeled(self) -> bool:
        return self.manifest.labeled

    @property
    def vocabulary(self) -> list[str]:
        return self.manifest.vocabulary

    def record(self, key: int | str) -> SampleRecord:
        if isinstance(key, str):
            if key not in self._by_id:
                raise KeyError(f"unknown sample id {key!r}")
            return self.manifest.samples[self._by_id[key]]
        if not -len(self) <= key < len(self):
            raise IndexError(f"sample index {key} out of range for {len(self)} samples")
        return self.manifest.samples[key]

    def get(self, key: int | str) -> LabeledSample:
        rec = self.record(key)
        k = self.manifest.num_keypoints
        if self._h5 is not None:
            group = self._h5[rec.locator]
            data = group["pose"][()]
            valid = group["valid"][()]
            fps = float(group.attrs["fps"])
        else:
            raw = (self.path / rec.locator).read_bytes()
            n = rec.frame_count * k * 2
            data = np.frombuffer(raw, dtype="<f4", count=n).reshape(rec.frame_count, k, 2)
            valid = np.frombuffer(raw, dtype=np.uint8, offset=n * 4).reshape(rec.frame_count, k).astype(bool)
            fps = rec.fps
        return LabeledSample(PoseSequence(data, valid, fps), rec.label, rec.gloss, rec.id, rec.signer)

    __getitem__ = get

    def split(self, name: str) -> list[str]:
        if name == "all":
            return self.ids
        if name not in self.manifest.splits:
            raise KeyError(f"corpus {self.manifest.corpus_id!r} has no split {name!r}")
        return list(self.manifest.splits[name])

    def labels(self, ids=None) -> np.ndarray:
        ids = self.ids if ids is None else ids
        return np.array([self.record(i).label for i in ids])


def open_corpus(path: str | Path) -> Corpus:
    return Corpus(path)


@dataclass(frozen=True)
class SubsetSpec:
    samples_per_class: int
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")


def subset_by_samples_per_class(corpus: Corpus, spec: SubsetSpec, split: str | None = None) -> list[str]:
    """Keep ``min(k, |class|)`` ids per class, drawn without replacement.

    Ids come back in corpus order so downstream batching is unaffected by
    the draw order.
    """
    if not corpus.labeled:
        raise ValueError("samples-per-class subsetting needs a labeled corpus")
    pool = corpus.ids if split is None else corpus.split(split)
    by_class = defaultdict(list)
    for sid in pool:
        by_class[corpus.record(sid).label].append(sid)
    rng = RandomSource(spec.seed)
    keep = set()
    for label in sorted(by_class):
        members = by_class[label]
        k = min(spec.samples_per_class, len(members))
        keep.update(members[i] for i in rng.choice(len(members), k))
    return [sid for sid in pool if sid in keep]


def sample_pretraining_clip(
    corpus: Corpus, rng: RandomSource, min_len: int = 60, max_len: int = 120, ids: list[str] | None = None
) -> PoseSequence:
    """A contiguous clip of ``min_len``..``max_len`` frames from one uniformly chosen sample."""
    if not 1 <= min_len <= max_len:
        raise ValueError(f"need 1 <= min_len <= max_len, got {min_len}, {max_len}")
    pool = corpus.ids if ids is None else ids
    eligible = [sid for sid in pool if corpus.record(sid).frame_count >= min_len]
    if not eligible:
        raise ValueError(f"no sample has at least {min_len} frames")
    sid = eligible[rng.integer(0, len(eligible) - 1)]
    pose = corpus.get(sid).pose
    length = rng.integer(min_len, min(max_len, pose.num_frames))
    start = rng.integer(0, pose.num_frames - length)
    return pose.frames(slice(start, start + length))


def read_pose_jsonl(path: str | Path, fps: float = 30.0) -> PoseSequence:
    """Import one clip from the per-frame JSON-lines ingestion format."""
    frames, flags = [], []
    last_t = None
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            t = int(rec["t"])
            if last_t is not None and t <= last_t:
                raise ValueError(f"{path}:{line_no}: frame index {t} does not increase")
            last_t = t
            kps = rec["kps"]
            frames.append(kps)
            flags.append(rec.get("valid", [True] * len(kps)))
    if not frames:
        raise ValueError(f"{path}: no frames")
    return PoseSequence(np.array(frames, dtype=np.float32), np.array(flags, dtype=bool), fps)


def write_pose_jsonl(pose: PoseSequence, path: str | Path):
    with open(path, "w") as fh:
        for t in range(pose.num_frames):
            fh.write(json.dumps({
                "t": t, "kps": pose.data[t].tolist(), "valid": pose.valid[t].tolist()
            }) + "\n")
