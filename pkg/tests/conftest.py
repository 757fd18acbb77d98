import itertools

import numpy as np
import pytest
import torch

from slrkit.pose import PoseSequence, SkeletonGraph

torch.set_num_threads(1)


def random_pose(rng, frames=12, keypoints=27, missing=0.0, fps=30.0):
    data = rng.normal(0.5, 0.2, size=(frames, keypoints, 2))
    valid = rng.random((frames, keypoints)) >= missing
    return PoseSequence(data, valid, fps)


def adjacency_oracle(node_count, edges):
    """Entry-by-entry evaluation of D^-1/2 (A + I) D^-1/2 with python floats."""
    a = [[1.0 if i == j else 0.0 for j in range(node_count)] for i in range(node_count)]
    for i, j in edges:
        a[i][j] = a[j][i] = 1.0
    deg = [sum(row) for row in a]
    return np.array(
        [[a[i][j] / (deg[i] ** 0.5 * deg[j] ** 0.5) for j in range(node_count)] for i in range(node_count)]
    )


def all_graphs(node_count):
    pairs = list(itertools.combinations(range(node_count), 2))
    for bits in range(1 << len(pairs)):
        yield SkeletonGraph(node_count, tuple(p for k, p in enumerate(pairs) if bits >> k & 1))


def interpolation_oracle(data, valid):
    """Per-track, per-frame scan for the nearest valid neighbours on each side."""
    frames, keypoints, _ = data.shape
    out = np.zeros(data.shape, dtype=np.float64)
    for k in range(keypoints):
        known = [t for t in range(frames) if valid[t, k]]
        for t in range(frames):
            before = [s for s in known if s <= t]
            after = [s for s in known if s >= t]
            for d in range(2):
                if before and after:
                    tl, tr = before[-1], after[0]
                    vl, vr = float(data[tl, k, d]), float(data[tr, k, d])
                    w = 0.0 if tr == tl else (t - tl) / (tr - tl)
                    out[t, k, d] = vl + w * (vr - vl)
                else:
                    out[t, k, d] = float(data[(before or after)[-1 if before else 0], k, d])
    return out.astype(np.float32)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
