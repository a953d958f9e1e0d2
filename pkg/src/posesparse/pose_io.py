"""Pose keypoint sequences: types, the on-disk format, and quality filtering.

File format (``posesparse-pose`` version 1) is JSON lines.  The first line is
the header::

    {"format": "posesparse-pose", "version": 1, "fps": 25.0,
     "width": 512, "height": 512, "num_keypoints": 31,
     "groups": {"face": [0, 12], "left_hand": [12, 17], ...}}

Group ranges are half-open ``[start, stop)`` keypoint indices; together they
must tile ``0..num_keypoints`` without gaps or overlap.  Every following line is
one frame::

    {"frame_index": 0, "source_index": 0, "keypoints": [[x, y, conf], ...]}

``source_index`` is optional and defaults to ``frame_index``; filtering keeps
it pointing at the frame's position in the unfiltered input.  Floats are
written with ``repr`` precision so write -> read round-trips bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .errors import FormatVersionError, ParseError, RangeError, SchemaError

FORMAT_NAME = "posesparse-pose"
FORMAT_VERSION = 1

GROUP_NAMES = ("face", "left_hand", "right_hand", "left_arm", "right_arm", "body", "shoulders")
UPPER_BODY_GROUPS = ("left_hand", "right_hand", "left_arm", "right_arm", "body", "shoulders")

# Per-group keypoint counts of the bundled synthetic rig. Real detectors can
# use any counts; the header carries the layout.
DEFAULT_GROUP_COUNTS = {
    "face": 12,
    "left_hand": 5,
    "right_hand": 5,
    "left_arm": 2,
    "right_arm": 2,
    "body": 3,
    "shoulders": 2,
}


class Keypoint(NamedTuple):
    x: float
    y: float
    confidence: float


@dataclass(frozen=True)
class GroupLayout:
    """Named, contiguous keypoint index ranges."""

    ranges: tuple[tuple[str, int, int], ...]

    @classmethod
    def from_counts(cls, counts: Mapping[str, int] = DEFAULT_GROUP_COUNTS) -> "GroupLayout":
        ranges, start = [], 0
        for name in GROUP_NAMES:
            n = int(counts[name])
            ranges.append((name, start, start + n))
            start += n
        return cls(tuple(ranges))

    @classmethod
    def from_mapping(cls, groups: Mapping[str, Iterable[int]]) -> "GroupLayout":
        missing = [g for g in GROUP_NAMES if g not in groups]
        if missing:
            raise SchemaError(f"group layout is missing groups: {missing}")
        extra = sorted(set(groups) - set(GROUP_NAMES))
        if extra:
            raise SchemaError(f"unknown groups in layout: {extra}")
        ranges = []
        for name in GROUP_NAMES:
            try:
                start, stop = (int(v) for v in groups[name])
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"group {name!r} must be a [start, stop) pair") from exc
            ranges.append((name, start, stop))
        layout = cls(tuple(ranges))
        layout.validate()
        return layout

    @property
    def num_keypoints(self) -> int:
        return max(stop for _, _, stop in self.ranges)

    def validate(self) -> None:
        spans = sorted((start, stop, name) for name, start, stop in self.ranges)
        cursor = 0
        for start, stop, name in spans:
            if stop <= start:
                raise SchemaError(f"group {name!r} is empty or reversed: [{start}, {stop})")
            if start != cursor:
                raise SchemaError(f"group ranges must tile the keypoints; gap or overlap at index {cursor}")
            cursor = stop

    def slice(self, name: str) -> slice:
        for g, start, stop in self.ranges:
            if g == name:
                return slice(start, stop)
        raise KeyError(name)

    def indices(self, names: Iterable[str]) -> np.ndarray:
        parts = [np.arange(self.slice(n).start, self.slice(n).stop) for n in names]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=int)

    def as_dict(self) -> dict[str, list[int]]:
        return {name: [start, stop] for name, start, stop in self.ranges}


@dataclass(frozen=True)
class PoseFrame:
    frame_index: int
    points: np.ndarray  # (B, 2) pixels
    confidence: np.ndarray  # (B,)
    layout: GroupLayout
    source_index: int | None = None

    @property
    def num_keypoints(self) -> int:
        return int(self.points.shape[0])

    @property
    def keypoints(self) -> list[Keypoint]:
        return [Keypoint(float(x), float(y), float(c)) for (x, y), c in zip(self.points, self.confidence)]

    def group(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        sl = self.layout.slice(name)
        return self.points[sl], self.confidence[sl]


@dataclass(frozen=True)
class PoseSequence:
    frames: tuple[PoseFrame, ...]
    fps: float
    image_size: tuple[int, int]  # (width, height)
    layout: GroupLayout

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def T(self) -> int:
        return len(self.frames)

    @property
    def num_keypoints(self) -> int:
        return self.layout.num_keypoints

    def points_array(self) -> np.ndarray:
        return np.stack([f.points for f in self.frames]) if self.frames else np.zeros((0, self.num_keypoints, 2))

    def in_frame(self, frame: PoseFrame) -> np.ndarray:
        return in_frame_mask(frame.points, self.image_size)


@dataclass(frozen=True)
class FilterPolicy:
    face_conf_min: float = 0.9
    body_conf_min: float = 0.8
    body_visibility_min: float = 0.9
    face_reduce: str = "min"
    body_reduce: str = "mean"

    def __post_init__(self):
        for name in ("face_conf_min", "body_conf_min", "body_visibility_min"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise RangeError(f"{name} must lie in [0, 1], got {v}")
        for name in ("face_reduce", "body_reduce"):
            if getattr(self, name) not in ("min", "mean"):
                raise RangeError(f"{name} must be 'min' or 'mean'")


REASON_FACE = "face_confidence"
REASON_BODY = "body_confidence"
REASON_VISIBILITY = "body_visibility"


@dataclass(frozen=True)
class FrameVerdict:
    frame_index: int
    source_index: int
    kept: bool
    reasons: tuple[str, ...] = ()
    face_confidence: float = math.nan
    body_confidence: float = math.nan
    body_visibility: float = math.nan


@dataclass
class FilterReport:
    verdicts: list[FrameVerdict] = field(default_factory=list)

    @property
    def kept(self) -> int:
        return sum(v.kept for v in self.verdicts)

    @property
    def rejected(self) -> list[FrameVerdict]:
        return [v for v in self.verdicts if not v.kept]

    def as_dict(self) -> dict:
        return {
            "format": "posesparse-filter-report",
            "version": 1,
            "total": len(self.verdicts),
            "kept": self.kept,
            "frames": [
                {
                    "frame_index": v.frame_index,
                    "source_index": v.source_index,
                    "kept": v.kept,
                    "reasons": list(v.reasons),
                    "face_confidence": v.face_confidence,
                    "body_confidence": v.body_confidence,
                    "body_visibility": v.body_visibility,
                }
                for v in self.verdicts
            ],
        }


def in_frame_mask(points: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    w, h = image_size
    x, y = points[:, 0], points[:, 1]
    return (x >= 0) & (x <= w) & (y >= 0) & (y <= h)


def make_frame(frame_index, keypoints, layout: GroupLayout, source_index=None) -> PoseFrame:
    """Build and validate a frame from a ``(B, 3)`` array of ``(x, y, conf)``."""
    arr = np.asarray(keypoints, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise SchemaError(f"frame {frame_index}: keypoints must be (B, 3), got shape {arr.shape}")
    if arr.shape[0] != layout.num_keypoints:
        raise SchemaError(
            f"frame {frame_index}: expected {layout.num_keypoints} keypoints, got {arr.shape[0]}"
        )
    if not np.all(np.isfinite(arr[:, :2])):
        raise RangeError(f"frame {frame_index}: non-finite keypoint coordinate")
    conf = arr[:, 2]
    if not np.all(np.isfinite(conf)) or np.any(conf < 0) or np.any(conf > 1):
        raise RangeError(f"frame {frame_index}: confidence outside [0, 1]")
    points = arr[:, :2].copy()
    conf = conf.copy()
    points.flags.writeable = False
    conf.flags.writeable = False
    source = int(frame_index) if source_index is None else int(source_index)
    return PoseFrame(int(frame_index), points, conf, layout, source)


def make_sequence(keypoints, layout: GroupLayout, fps=25.0, image_size=(512, 512)) -> PoseSequence:
    """Build a sequence from a ``(T, B, 3)`` array."""
    frames = tuple(make_frame(t, kp, layout) for t, kp in enumerate(keypoints))
    return PoseSequence(frames, float(fps), (int(image_size[0]), int(image_size[1])), layout)


def validate_sequence(seq: PoseSequence) -> None:
    seq.layout.validate()
    for expected, frame in enumerate(seq.frames):
        if frame.frame_index != expected:
            raise SchemaError(f"frame indices must run 0..T-1; found {frame.frame_index} at position {expected}")
        if frame.num_keypoints != seq.num_keypoints:
            raise SchemaError(f"frame {frame.frame_index}: expected {seq.num_keypoints} keypoints")


def save_pose_sequence(seq: PoseSequence, path) -> None:
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "fps": seq.fps,
        "width": seq.image_size[0],
        "height": seq.image_size[1],
        "num_keypoints": seq.num_keypoints,
        "groups": seq.layout.as_dict(),
    }
    lines = [json.dumps(header)]
    for f in seq.frames:
        kps = [[float(x), float(y), float(c)] for (x, y), c in zip(f.points, f.confidence)]
        rec = {"frame_index": f.frame_index}
        if f.source_index is not None and f.source_index != f.frame_index:
            rec["source_index"] = f.source_index
        rec["keypoints"] = kps
        lines.append(json.dumps(rec))
    Path(path).write_text("\n".join(lines) + "\n")


def load_pose_sequence(path) -> PoseSequence:
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError(f"{path}: empty pose file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:1: header is not valid JSON ({exc.msg})") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise ParseError(f"{path}: not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise FormatVersionError(f"{path}: unsupported pose format version {header.get('version')!r}")
    try:
        width, height = int(header["width"]), int(header["height"])
        fps = float(header["fps"])
        groups = header["groups"]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: header missing or invalid field ({exc})") from exc
    if not isinstance(groups, dict):
        raise SchemaError(f"{path}: 'groups' must be an object")
    layout = GroupLayout.from_mapping(groups)
    if "num_keypoints" in header and int(header["num_keypoints"]) != layout.num_keypoints:
        raise SchemaError(f"{path}: num_keypoints disagrees with group layout")

    frames = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict) or "frame_index" not in rec or "keypoints" not in rec:
            raise ParseError(f"{path}:{lineno}: frame record needs 'frame_index' and 'keypoints'")
        kps = rec["keypoints"]
        if not isinstance(kps, list) or any(not isinstance(k, list) or len(k) != 3 for k in kps):
            raise SchemaError(f"{path}:{lineno}: keypoints must be a list of [x, y, conf] triples")
        try:
            arr = np.array(kps, dtype=np.float64).reshape(len(kps), 3)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{path}:{lineno}: non-numeric keypoint value") from exc
        frames.append(make_frame(rec["frame_index"], arr, layout, rec.get("source_index")))
    seq = PoseSequence(tuple(frames), fps, (width, height), layout)
    validate_sequence(seq)
    return seq


def _reduce(values: np.ndarray, how: str) -> float:
    if values.size == 0:
        return math.nan
    return float(values.min() if how == "min" else values.mean())


def judge_frame(frame: PoseFrame, image_size, policy: FilterPolicy) -> tuple[tuple[str, ...], float, float, float]:
    face_idx = frame.layout.indices(["face"])
    body_idx = frame.layout.indices(UPPER_BODY_GROUPS)
    face_conf = _reduce(frame.confidence[face_idx], policy.face_reduce)
    body_conf = _reduce(frame.confidence[body_idx], policy.body_reduce)
    visible = in_frame_mask(frame.points[body_idx], image_size) & (frame.confidence[body_idx] > 0)
    visibility = float(visible.mean()) if visible.size else math.nan

    reasons = []
    if not face_conf > policy.face_conf_min:
        reasons.append(REASON_FACE)
    if not body_conf > policy.body_conf_min:
        reasons.append(REASON_BODY)
    if not visibility >= policy.body_visibility_min:
        reasons.append(REASON_VISIBILITY)
    return tuple(reasons), face_conf, body_conf, visibility


def filter_frames(seq: PoseSequence, policy: FilterPolicy = FilterPolicy()) -> tuple[PoseSequence, FilterReport]:
    """Keep frames with reliable face and upper-body keypoints.

    A frame survives when its face confidence (``policy.face_reduce`` over face
    points) exceeds ``face_conf_min``, its upper-body confidence exceeds
    ``body_conf_min`` and at least ``body_visibility_min`` of its upper-body
    points are visible (inside the image with confidence > 0).

    Retained frames are renumbered ``0..n-1``; ``source_index`` keeps their
    original position.  The report has one verdict per input frame.
    """
    kept, report = [], FilterReport()
    for frame in seq.frames:
        reasons, fc, bc, vis = judge_frame(frame, seq.image_size, policy)
        source = frame.frame_index if frame.source_index is None else frame.source_index
        report.verdicts.append(FrameVerdict(frame.frame_index, source, not reasons, reasons, fc, bc, vis))
        if not reasons:
            kept.append(replace(frame, frame_index=len(kept), source_index=source))
    return PoseSequence(tuple(kept), seq.fps, seq.image_size, seq.layout), report
