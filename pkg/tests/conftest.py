"""Shared fixtures and brute-force oracles for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from posesparse.alignment import SimilarityMatrix
from posesparse.pose_io import DEFAULT_GROUP_COUNTS, GroupLayout, make_sequence
from posesparse.regions import RegionLabeling, TokenGrid
from posesparse.synthetic import rest_pose, talking_sequence

LAYOUT = GroupLayout.from_counts(DEFAULT_GROUP_COUNTS)


@pytest.fixture
def layout():
    return LAYOUT


@pytest.fixture
def small_sequence():
    return talking_sequence(8, width=128, height=128, seed=3, sway=3.0, jitter=0.3)


# -- filter fixture ---------------------------------------------------------

def planted_filter_fixture():
    """Ten frames, four of them planted to violate the default filter policy.

    Returns ``(sequence, expected)`` where ``expected[t]`` lists the reasons
    frame ``t`` must be rejected for (empty when it must be kept).  Three
    kept frames sit just inside a threshold to pin down strictness.
    """
    face = LAYOUT.slice("face")
    upper = np.r_[LAYOUT.slice("left_hand"), LAYOUT.slice("right_hand"), LAYOUT.slice("left_arm"),
                  LAYOUT.slice("right_arm"), LAYOUT.slice("body"), LAYOUT.slice("shoulders")]
    frames = []
    expected = {}
    for t in range(10):
        kp = np.concatenate([rest_pose(), np.full((LAYOUT.num_keypoints, 1), 0.95)], axis=1)
        reasons = []
        if t == 1:  # one face point below 0.9
            kp[face.start + 3, 2] = 0.85
            reasons = ["face_confidence"]
        elif t == 3:  # weakest face point just above 0.9: kept
            kp[face.start, 2] = 0.905
        elif t == 4:  # whole upper body at 0.75
            kp[upper, 2] = 0.75
            reasons = ["body_confidence"]
        elif t == 5:  # upper-body mean 0.81: kept
            kp[upper, 2] = 0.81
        elif t == 6:  # 2 of 19 upper-body points outside the image: 17/19 < 0.9
            kp[upper[0], 0] = -40.0
            kp[upper[1], 1] = 700.0
            reasons = ["body_visibility"]
        elif t == 7:  # 1 of 19 outside: 18/19 >= 0.9, kept
            kp[upper[2], 0] = 600.0
        elif t == 8:  # face and body confidence both too low
            kp[face, 2] = 0.5
            kp[upper, 2] = 0.6
            reasons = ["face_confidence", "body_confidence"]
        frames.append(kp)
        expected[t] = reasons
    return make_sequence(np.array(frames), LAYOUT, image_size=(512, 512)), expected


# -- random structures ------------------------------------------------------

def random_labeling(rng, T, grid: TokenGrid, p_background=0.5) -> RegionLabeling:
    n = grid.N
    fg = rng.integers(1, 6, size=(T, n))
    labels = np.where(rng.random((T, n)) < p_background, 0, fg).astype(np.uint8)
    return RegionLabeling(labels, grid)


def random_similarity(rng, T, ties=False) -> SimilarityMatrix:
    vals = np.full((T, T), np.nan)
    for t in range(1, T):
        vals[t, :t] = rng.integers(0, 4, size=t).astype(float) if ties else rng.random(t)
    return SimilarityMatrix(vals)


# -- oracles ----------------------------------------------------------------

def topk_oracle(values: np.ndarray, K: int) -> list[tuple[int, ...]]:
    """Sort-and-threshold: everything strictly below the K-th smallest value,
    then fill the remaining slots with the most recent frames tied at it."""
    T = values.shape[0]
    out = []
    for t_q in range(T):
        row = values[t_q, :t_q]
        if t_q <= K:
            keep = set(range(t_q))
        else:
            kth = np.sort(row)[K - 1]
            keep = {t for t in range(t_q) if row[t] < kth}
            tied = [t for t in range(t_q - 1, -1, -1) if row[t] == kth]
            keep.update(tied[: K - len(keep)])
        keep.add(t_q)
        out.append(tuple(sorted(keep)))
    return out


def dense_mask_oracle(admissible, labels: np.ndarray) -> np.ndarray:
    """Token-by-token mask: admissible frame pair and (same frame or same
    non-background region)."""
    T, N = labels.shape
    out = np.zeros((T * N, T * N), dtype=bool)
    for t_q in range(T):
        for t_k in admissible[t_q]:
            for i in range(N):
                for j in range(N):
                    if t_q == t_k or (labels[t_q, i] != 0 and labels[t_q, i] == labels[t_k, j]):
                        out[t_q * N + i, t_k * N + j] = True
    return out


def count_pairs_oracle(admissible, labels: np.ndarray) -> int:
    T, N = labels.shape
    total = 0
    for t_q in range(T):
        for t_k in range(T):
            if t_k not in admissible[t_q]:
                continue
            for i in range(N):
                for j in range(N):
                    if t_q == t_k or (labels[t_q, i] != 0 and labels[t_q, i] == labels[t_k, j]):
                        total += 1
    return total


def attention_oracle(q, k, v, allowed, scale):
    """Float64 softmax attention over the allowed entries of each row."""
    s = np.einsum("hid,hjd->hij", q.astype(np.float64), k.astype(np.float64)) * scale
    s = np.where(allowed[None], s, -np.inf)
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    return np.einsum("hij,hjd->hid", p, v.astype(np.float64))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
