"""Keypoint-driven region labels on the token grid, and rigid moving-least-squares warps."""

from __future__ import annotations

import enum
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyRegionWarning, FormatVersionError, ParseError, ShapeError
from .pose_io import PoseFrame, PoseSequence, in_frame_mask


class RegionLabel(enum.IntEnum):
    BACKGROUND = 0
    FACE = 1
    HANDS = 2
    ARMS = 3
    BODIES = 4
    SHOULDERS = 5


REGIONS = (RegionLabel.FACE, RegionLabel.HANDS, RegionLabel.ARMS, RegionLabel.BODIES, RegionLabel.SHOULDERS)

# Each group gets its own hull; a region is the union of its groups' hulls.
REGION_GROUPS = {
    RegionLabel.FACE: ("face",),
    RegionLabel.HANDS: ("left_hand", "right_hand"),
    RegionLabel.ARMS: ("left_arm", "right_arm"),
    RegionLabel.BODIES: ("body",),
    RegionLabel.SHOULDERS: ("shoulders",),
}

# Highest priority first; a token inside several hulls takes the first match.
PRIORITY = (RegionLabel.FACE, RegionLabel.HANDS, RegionLabel.ARMS, RegionLabel.SHOULDERS, RegionLabel.BODIES)

_CHARS = {
    RegionLabel.BACKGROUND: ".",
    RegionLabel.FACE: "F",
    RegionLabel.HANDS: "H",
    RegionLabel.ARMS: "A",
    RegionLabel.BODIES: "B",
    RegionLabel.SHOULDERS: "S",
}


@dataclass(frozen=True)
class TokenGrid:
    height_tokens: int
    width_tokens: int
    patch_size: int

    def __post_init__(self):
        if self.height_tokens < 1 or self.width_tokens < 1:
            raise ConfigError("token grid needs at least one token")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")

    @classmethod
    def for_image(cls, image_size: tuple[int, int], patch_size: int) -> "TokenGrid":
        w, h = image_size
        return cls(-(-h // patch_size), -(-w // patch_size), patch_size)

    @property
    def N(self) -> int:
        return self.height_tokens * self.width_tokens

    @property
    def extent(self) -> tuple[int, int]:
        """Covered (width, height) in pixels."""
        return self.width_tokens * self.patch_size, self.height_tokens * self.patch_size

    def covers(self, image_size: tuple[int, int]) -> bool:
        return self.extent[0] >= image_size[0] and self.extent[1] >= image_size[1]


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns hull vertices counter-clockwise.

    Degenerate inputs give 1 (point) or 2 (segment) vertices.
    """
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _cells_touching_hull(hull: np.ndarray, grid: TokenGrid, dilation: int) -> np.ndarray:
    """Boolean (H, W) of tokens whose cell, grown by ``dilation`` cells on
    every side, intersects the convex polygon ``hull`` (grid units).

    Separating-axis test: the box and the polygon are disjoint iff their
    projections are disjoint on a box axis or a polygon edge normal.
    """
    out = np.zeros((grid.height_tokens, grid.width_tokens), dtype=bool)
    lo = np.floor(hull.min(axis=0)).astype(int) - dilation - 1
    hi = np.floor(hull.max(axis=0)).astype(int) + dilation + 1
    c0, r0 = max(lo[0], 0), max(lo[1], 0)
    c1, r1 = min(hi[0], grid.width_tokens - 1), min(hi[1], grid.height_tokens - 1)
    if c0 > c1 or r0 > r1:
        return out
    cols = np.arange(c0, c1 + 1)
    rows = np.arange(r0, r1 + 1)
    cc, rr = np.meshgrid(cols, rows)
    bx0, bx1 = cc - dilation, cc + 1 + dilation
    by0, by1 = rr - dilation, rr + 1 + dilation

    hit = (bx1 >= hull[:, 0].min()) & (bx0 <= hull[:, 0].max())
    hit &= (by1 >= hull[:, 1].min()) & (by0 <= hull[:, 1].max())
    if len(hull) >= 2:
        edges = np.roll(hull, -1, axis=0) - hull
        if len(hull) == 2:
            edges = edges[:1]
        for e in edges:
            n = np.array([-e[1], e[0]])
            proj = hull @ n
            corners = np.stack([bx0 * n[0] + by0 * n[1], bx1 * n[0] + by0 * n[1],
                                bx0 * n[0] + by1 * n[1], bx1 * n[0] + by1 * n[1]])
            hit &= (corners.max(axis=0) >= proj.min()) & (corners.min(axis=0) <= proj.max())
    out[r0:r1 + 1, c0:c1 + 1] = hit
    return out


def label_tokens(frame: PoseFrame, grid: TokenGrid, dilation: int = 1, image_size=None,
                 min_confidence: float = 0.0) -> np.ndarray:
    """Region label (a ``RegionLabel`` value) for each of the frame's N tokens.

    A region covers every token whose cell, grown by ``dilation`` tokens,
    intersects the convex hull of one of the region's keypoint groups (in
    grid units).  Only keypoints inside the image with confidence above
    ``min_confidence`` count.  Overlaps go to the higher-priority region;
    leftover tokens are background.  Returns a flat uint8 array, row-major.
    """
    if dilation < 0:
        raise ConfigError("dilation must be >= 0")
    image_size = image_size or grid.extent
    usable = in_frame_mask(frame.points, image_size) & (frame.confidence > min_confidence)
    labels = np.zeros((grid.height_tokens, grid.width_tokens), dtype=np.uint8)
    for region in reversed(PRIORITY):
        cover = np.zeros_like(labels, dtype=bool)
        found = False
        for group in REGION_GROUPS[region]:
            sl = frame.layout.slice(group)
            pts = frame.points[sl][usable[sl]]
            if len(pts) == 0:
                continue
            found = True
            cover |= _cells_touching_hull(convex_hull(pts / grid.patch_size), grid, dilation)
        if not found:
            warnings.warn(f"frame {frame.frame_index}: no usable keypoints for {region.name.lower()}",
                          EmptyRegionWarning, stacklevel=2)
        labels[cover] = region
    return labels.reshape(-1)


def mls_rigid_warp(src, dst, query, alpha: float = 1.0) -> np.ndarray:
    """Rigid moving-least-squares deformation of ``query`` points.

    Control points ``src[i]`` map to ``dst[i]``.  Each query ``v`` gets the
    rotation + translation that best maps the control points under weights
    ``w_i = |v - src_i|^(-2 alpha)``.  A query sitting exactly on a control
    point returns that point's destination.
    """
    p = np.asarray(src, dtype=float)
    q = np.asarray(dst, dtype=float)
    v = np.atleast_2d(np.asarray(query, dtype=float))
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 2:
        raise ShapeError("control points must be matching (B, 2) arrays")
    if len(p) < 2:
        raise ConfigError("rigid MLS needs at least 2 control points")
    if not np.all(np.isfinite(v)):
        raise ValueError("query positions must be finite")

    d2 = ((v[:, None, :] - p[None, :, :]) ** 2).sum(-1)  # (M, B)
    on_ctrl = d2 == 0
    hit = on_ctrl.any(axis=1)
    with np.errstate(divide="ignore"):
        w = np.where(on_ctrl, 0.0, d2 ** -alpha)
    w[hit] = 1.0  # placeholder weights; these rows are overwritten below
    wsum = w.sum(axis=1, keepdims=True)
    p_star = w @ p / wsum
    q_star = w @ q / wsum
    ph = p[None] - p_star[:, None]
    qh = q[None] - q_star[:, None]
    a = (w * (ph * qh).sum(-1)).sum(axis=1)
    b = (w * (ph[..., 0] * qh[..., 1] - ph[..., 1] * qh[..., 0])).sum(axis=1)
    theta = np.arctan2(b, a)
    c, s = np.cos(theta), np.sin(theta)
    r = v - p_star
    out = np.stack([c * r[:, 0] - s * r[:, 1], s * r[:, 0] + c * r[:, 1]], axis=1) + q_star
    if hit.any():
        out[hit] = q[on_ctrl[hit].argmax(axis=1)]
    return out


@dataclass(frozen=True)
class MlsRigidWarp:
    control_points_src: np.ndarray
    control_points_dst: np.ndarray
    alpha: float = 1.0

    def __call__(self, query) -> np.ndarray:
        return mls_rigid_warp(self.control_points_src, self.control_points_dst, query, self.alpha)


def fill_low_confidence(frame: PoseFrame, anchor: PoseFrame, conf_min: float, alpha: float = 1.0) -> PoseFrame:
    """Re-estimate a frame's unreliable keypoints from a reliable anchor frame.

    Points reliable in both frames act as MLS control points; unreliable
    points of ``frame`` are replaced by the anchor's positions pushed through
    the warp and given confidence ``conf_min``.  Frames with fewer than two
    shared reliable points are returned unchanged.
    """
    ok_f = frame.confidence >= conf_min
    ok_a = anchor.confidence >= conf_min
    ctrl = ok_f & ok_a
    fill = ~ok_f & ok_a
    if ctrl.sum() < 2 or not fill.any():
        return frame
    warp = MlsRigidWarp(anchor.points[ctrl], frame.points[ctrl], alpha)
    points = frame.points.copy()
    conf = frame.confidence.copy()
    points[fill] = warp(anchor.points[fill])
    conf[fill] = conf_min
    return PoseFrame(frame.frame_index, points, conf, frame.layout, frame.source_index)


@dataclass(frozen=True)
class RegionLabeling:
    labels: np.ndarray  # (T, N) uint8
    grid: TokenGrid

    @property
    def T(self) -> int:
        return int(self.labels.shape[0])

    @property
    def N(self) -> int:
        return int(self.labels.shape[1])

    def token_index_sets(self, t: int) -> dict[RegionLabel, np.ndarray]:
        row = self.labels[t]
        return {r: np.flatnonzero(row == r) for r in RegionLabel}

    def region_counts(self) -> np.ndarray:
        """(T, 6) token count per frame and label value."""
        return np.stack([np.bincount(row, minlength=len(RegionLabel)) for row in self.labels])

    def frame_grid(self, t: int) -> np.ndarray:
        return self.labels[t].reshape(self.grid.height_tokens, self.grid.width_tokens)

    def dump_text(self) -> str:
        lines = [f"# posesparse-regions text v1 T={self.T} H={self.grid.height_tokens} W={self.grid.width_tokens}",
                 "# " + " ".join(f"{_CHARS[r]}={r.name.lower()}" for r in RegionLabel)]
        for t in range(self.T):
            lines.append(f"frame {t}")
            for row in self.frame_grid(t):
                lines.append("".join(_CHARS[RegionLabel(v)] for v in row))
        return "\n".join(lines) + "\n"


def label_sequence(seq: PoseSequence, grid: TokenGrid, dilation: int = 1, mode: str = "per_frame",
                   reference_frame: int = 0, fallback_conf: float | None = 0.3, alpha: float = 1.0) -> RegionLabeling:
    """Label every frame of ``seq``.

    ``mode="per_frame"`` recomputes regions from each frame's keypoints;
    ``mode="reference"`` labels ``reference_frame`` once and reuses it.  When
    ``fallback_conf`` is set, keypoints below it are first re-estimated by an
    MLS warp from the frame with the highest mean confidence.
    """
    if not grid.covers(seq.image_size):
        raise ConfigError(f"token grid {grid.extent} does not cover image {seq.image_size}")
    if mode not in ("per_frame", "reference"):
        raise ConfigError(f"unknown labeling mode {mode!r}")
    frames = list(seq.frames)
    if fallback_conf is not None and frames:
        anchor = frames[int(np.argmax([f.confidence.mean() for f in frames]))]
        frames = [fill_low_confidence(f, anchor, fallback_conf, alpha) for f in frames]
    if mode == "reference":
        row = label_tokens(frames[reference_frame], grid, dilation, seq.image_size)
        labels = np.tile(row, (len(frames), 1))
    else:
        labels = np.stack([label_tokens(f, grid, dilation, seq.image_size) for f in frames]) if frames \
            else np.zeros((0, grid.N), dtype=np.uint8)
    return RegionLabeling(labels.astype(np.uint8), grid)


class RegionCorrespondence:
    """Token-pair predicate between two frames: same non-background region."""

    def __init__(self, labels_q, labels_k):
        self.labels_q = np.asarray(labels_q)
        self.labels_k = np.asarray(labels_k)
        if self.labels_q.shape != self.labels_k.shape:
            raise ShapeError("frame labelings must come from the same token grid")

    def __call__(self, i: int, j: int) -> bool:
        li = self.labels_q[i]
        return bool(li == self.labels_k[j] and li != RegionLabel.BACKGROUND)

    def dense(self) -> np.ndarray:
        lq = self.labels_q[:, None]
        return (lq == self.labels_k[None, :]) & (lq != RegionLabel.BACKGROUND)


def region_correspondence(labels_q, labels_k) -> RegionCorrespondence:
    return RegionCorrespondence(labels_q, labels_k)


_RL_MAGIC = b"PSRL"
_RL_VERSION = 1


def save_labeling(lab: RegionLabeling, path) -> None:
    """Binary layout: ``b"PSRL"``, u32 version, u32 T, u32 N, u32 grid height,
    u32 grid width, u32 patch size, u16 length + UTF-8 comma-separated label
    names (index = byte value), then T*N uint8 labels row-major."""
    names = ",".join(r.name.lower() for r in RegionLabel).encode()
    head = struct.pack("<IIIIII", _RL_VERSION, lab.T, lab.N, lab.grid.height_tokens,
                       lab.grid.width_tokens, lab.grid.patch_size)
    Path(path).write_bytes(_RL_MAGIC + head + struct.pack("<H", len(names)) + names
                           + np.ascontiguousarray(lab.labels, dtype=np.uint8).tobytes())


def load_labeling(path) -> RegionLabeling:
    data = Path(path).read_bytes()
    if data[:4] != _RL_MAGIC or len(data) < 30:
        raise ParseError(f"{path}: not a region labeling file")
    version, T, N, h, w, ps = struct.unpack_from("<IIIIII", data, 4)
    if version != _RL_VERSION:
        raise FormatVersionError(f"{path}: unsupported labeling format version {version}")
    (nlen,) = struct.unpack_from("<H", data, 28)
    names = data[30:30 + nlen].decode().split(",")
    if names != [r.name.lower() for r in RegionLabel]:
        raise ParseError(f"{path}: unexpected label enumeration {names}")
    body = data[30 + nlen:]
    if len(body) != T * N or h * w != N:
        raise ParseError(f"{path}: label payload does not match header")
    labels = np.frombuffer(body, dtype=np.uint8).reshape(T, N).copy()
    return RegionLabeling(labels, TokenGrid(h, w, ps))
