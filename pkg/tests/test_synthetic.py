import numpy as np
import pytest

from slrkit.corpus import Corpus
from slrkit.synthetic import SyntheticSpec, make_synthetic_corpus, mean_motion, nearest_centroid_accuracy, synthesize


@pytest.fixture(scope="module")
def default_corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("syn") / "syn.h5"
    make_synthetic_corpus(path, SyntheticSpec())
    with Corpus(path) as c:
        yield c


def brute_force_centroid(features, labels):
    correct = 0
    for i in range(len(features)):
        best, best_d = None, None
        for c in sorted(set(labels.tolist())):
            members = [features[j] for j in range(len(features)) if labels[j] == c and j != i]
            if not members:
                continue
            centroid = [sum(col) / len(members) for col in zip(*members)]
            d = sum((a - b) ** 2 for a, b in zip(features[i], centroid))
            if best_d is None or d < best_d:
                best, best_d = c, d
        correct += best == labels[i]
    return correct / len(features)


def test_default_shape(default_corpus):
    assert len(default_corpus) == 100
    sample = default_corpus.get(0)
    assert sample.pose.data.shape == (80, 27, 2)
    assert default_corpus.vocabulary == [f"sign{c:02d}" for c in range(5)]
    assert {k: len(v) for k, v in default_corpus.manifest.splits.items()} == {"train": 60, "val": 20, "test": 20}
    assert np.bincount(default_corpus.labels(default_corpus.split("test"))).tolist() == [4] * 5


def test_same_seed_is_bit_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    make_synthetic_corpus(a, num_classes=3, samples_per_class=4, frames=20, seed=9)
    make_synthetic_corpus(b, num_classes=3, samples_per_class=4, frames=20, seed=9)
    for name in ["manifest.json"] + [f"samples/{i:06d}.bin" for i in range(12)]:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    make_synthetic_corpus(b, num_classes=3, samples_per_class=4, frames=20, seed=10)
    assert (a / "samples/000000.bin").read_bytes() != (b / "samples/000000.bin").read_bytes()


def test_classes_separable_by_mean_motion(default_corpus):
    samples = [default_corpus.get(i) for i in default_corpus.ids]
    features = np.stack([mean_motion(s.pose) for s in samples])
    labels = np.array([s.label for s in samples])
    acc = nearest_centroid_accuracy(features, labels)
    assert acc > 0.9
    assert acc == brute_force_centroid(features.tolist(), labels)


def test_unlabeled_corpus():
    samples, splits, vocabulary = synthesize(SyntheticSpec(num_classes=2, samples_per_class=2, frames=5,
                                                           labeled=False))
    assert all(s.label is None for s in samples)
    assert splits == {} and vocabulary == []


@pytest.mark.parametrize("bad", [
    {"num_classes": 1}, {"samples_per_class": 0}, {"frames": 1}, {"noise": -1.0},
    {"scale_range": (0.0, 1.0)}, {"tempo_range": (1.2, 0.8)}, {"split_fractions": (("train", 0.5),)},
])
def test_degenerate_spec_rejected(bad):
    with pytest.raises(ValueError):
        SyntheticSpec(**bad)
