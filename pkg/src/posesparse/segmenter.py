"""Split long sequences into overlapping segments and fuse them back together."""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class SegmentPlan:
    T: int
    segment_length: int
    overlap: int
    segments: tuple[tuple[int, int], ...]  # half-open [start, end)

    def overlaps(self) -> list[int]:
        """Actual overlap between each segment and its predecessor."""
        return [self.segments[i - 1][1] - self.segments[i][0] for i in range(1, len(self.segments))]

    def as_dict(self) -> dict:
        return {"format": "posesparse-segment-plan", "version": 1, "T": self.T,
                "segment_length": self.segment_length, "overlap": self.overlap,
                "segments": [list(s) for s in self.segments]}

    def to_json(self) -> str:
        return json.dumps(self.as_dict())


def plan_segments(T: int, segment_length: int = 16, overlap: int = 4) -> SegmentPlan:
    """Greedy tiling with stride ``segment_length - overlap``.

    The last segment is pulled back to end exactly at ``T``, so it may
    overlap its predecessor by more than ``overlap``.  A sequence no longer
    than one segment gets a single (possibly short) segment.
    """
    if T < 1:
        raise ConfigError("T must be >= 1")
    if not 0 <= overlap < segment_length:
        raise ConfigError(f"need 0 <= overlap < segment_length, got overlap={overlap}, length={segment_length}")
    stride = segment_length - overlap
    segs = []
    start = 0
    while True:
        end = start + segment_length
        if end >= T:
            segs.append((max(0, T - segment_length), T))
            break
        segs.append((start, end))
        start += stride
    return SegmentPlan(T, segment_length, overlap, tuple(segs))


@dataclass(frozen=True)
class FusionWeights:
    """Per frame, ``(segment index, weight)`` pairs; weights are exact fractions."""

    per_frame: tuple[tuple[tuple[int, Fraction], ...], ...]

    def dense(self, num_segments: int) -> np.ndarray:
        out = np.zeros((len(self.per_frame), num_segments))
        for f, entries in enumerate(self.per_frame):
            for s, w in entries:
                out[f, s] = float(w)
        return out


def fusion_weights(plan: SegmentPlan) -> FusionWeights:
    """Progressive linear ramps over each overlap.

    Segments are merged in order.  Where segment ``s`` overlaps the frames
    already covered by ``ov`` frames, its ``k``-th shared frame
    (``k = 0..ov-1``) gets weight ``(k + 1) / (ov + 1)`` and the weights
    accumulated so far are scaled by the remainder.  With two segments per
    frame this is the plain cross-fade ``w_new(k) = (k + 1) / (ov + 1)``.
    """
    frames: list[dict[int, Fraction]] = [dict() for _ in range(plan.T)]
    covered_end = 0
    for s, (start, end) in enumerate(plan.segments):
        ov = max(0, covered_end - start)
        for f in range(start, end):
            k = f - start
            if k < ov:
                w_new = Fraction(k + 1, ov + 1)
                for key in frames[f]:
                    frames[f][key] *= 1 - w_new
                frames[f][s] = w_new
            else:
                frames[f] = {s: Fraction(1)}
        covered_end = max(covered_end, end)
    return FusionWeights(tuple(tuple(sorted(d.items())) for d in frames))


def fuse(segments: Sequence[np.ndarray], plan: SegmentPlan) -> np.ndarray:
    """Blend per-segment frame arrays into one ``(T, ...)`` array.

    ``segments[s]`` holds the frames ``plan.segments[s]`` along axis 0.
    Frames covered once are copied; shared frames are the weighted sum of
    their segments, clamped to the contributors' range, and passed through
    unchanged wherever all contributors agree.
    """
    if len(segments) != len(plan.segments):
        raise ShapeError(f"plan has {len(plan.segments)} segments, got {len(segments)} arrays")
    arrays = [np.asarray(a) for a in segments]
    tail = arrays[0].shape[1:]
    for (start, end), a in zip(plan.segments, arrays):
        if a.shape[0] != end - start or a.shape[1:] != tail:
            raise ShapeError(f"segment [{start}, {end}) expects shape {(end - start,) + tail}, got {a.shape}")
    weights = fusion_weights(plan)
    dtype = np.result_type(*arrays, np.float64) if any(len(w) > 1 for w in weights.per_frame) else arrays[0].dtype
    out = np.empty((plan.T,) + tail, dtype=dtype)
    for f, entries in enumerate(weights.per_frame):
        vals = [arrays[s][f - plan.segments[s][0]] for s, _ in entries]
        if len(vals) == 1:
            out[f] = vals[0]
            continue
        stack = np.stack(vals)
        blended = sum(float(w) * v for (_, w), v in zip(entries, vals))
        lo, hi = stack.min(axis=0), stack.max(axis=0)
        out[f] = np.where(lo == hi, lo, np.clip(blended, lo, hi))
    return out
