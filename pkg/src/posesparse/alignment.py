"""Rigid pose alignment, pairwise pose similarity and top-K history selection."""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateError, FormatVersionError, ParseError
from .pose_io import GROUP_NAMES, PoseFrame, PoseSequence


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray  # (2, 2), det +1
    translation: np.ndarray  # (2,)
    scale: float = 1.0

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(2), np.zeros(2))

    @classmethod
    def from_angle(cls, angle: float, translation=(0.0, 0.0), scale: float = 1.0) -> "RigidTransform":
        c, s = np.cos(angle), np.sin(angle)
        return cls(np.array([[c, -s], [s, c]]), np.asarray(translation, dtype=float), float(scale))

    @property
    def angle(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=float) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class GlobalMaskConfig:
    k: int = 4
    weight_by_confidence: bool = False
    allow_scale: bool = False
    groups: tuple[str, ...] = GROUP_NAMES

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ConfigError(f"top-K count must be an integer >= 1, got {self.k!r}")
        unknown = set(self.groups) - set(GROUP_NAMES)
        if unknown or not self.groups:
            raise ConfigError(f"similarity groups must be a non-empty subset of {GROUP_NAMES}")


def _points(x) -> np.ndarray:
    return x.points if isinstance(x, PoseFrame) else np.asarray(x, dtype=np.float64)


def rigid_align(source, target, weights=None, allow_scale: bool = False) -> tuple[RigidTransform, float]:
    """Best rigid fit ``target ~ R @ source + t`` and its L2 residual.

    ``source`` and ``target`` are PoseFrames or ``(B, 2)`` arrays.  The
    residual is ``sqrt(sum_i w_i * |target_i - tau(source_i)|^2)`` with
    ``w = 1`` unless weights are given.  Rotation comes from the polar factor
    of the weighted cross-covariance, with the reflection case flipped back to
    a proper rotation.  ``allow_scale`` adds a uniform scale (similarity fit).
    """
    src, dst = _points(source), _points(target)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError(f"point sets must share a (B, 2) shape, got {src.shape} and {dst.shape}")
    if src.shape[0] < 2:
        raise DegenerateError("rigid alignment needs at least 2 keypoints")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be non-negative with a positive sum")

    wsum = w.sum()
    c_src = w @ src / wsum
    c_dst = w @ dst / wsum
    S = src - c_src
    D = dst - c_dst
    spread = float(w @ np.einsum("ij,ij->i", S, S))
    extent = 1.0 + float(np.abs(src).max())
    if spread <= (1e-12 * extent) ** 2 * wsum:
        raise DegenerateError("source keypoints coincide; rotation is undetermined")

    M = (D * w[:, None]).T @ S  # sum_i w_i d_i s_i^T
    U, sig, Vt = np.linalg.svd(M)
    d = 1.0 if np.linalg.det(U @ Vt) >= 0 else -1.0
    R = U @ np.diag([1.0, d]) @ Vt
    scale = float((sig[0] + d * sig[1]) / spread) if allow_scale else 1.0
    t = c_dst - scale * R @ c_src
    tf = RigidTransform(R, t, scale)
    diff = dst - tf.apply(src)
    residual = float(np.sqrt(w @ np.einsum("ij,ij->i", diff, diff)))
    return tf, residual


@dataclass(frozen=True)
class SimilarityMatrix:
    """Alignment residuals ``values[t_q, t_k]``, defined only for ``t_k < t_q``.

    Undefined entries hold NaN.
    """

    values: np.ndarray

    @property
    def T(self) -> int:
        return int(self.values.shape[0])

    def row(self, t_q: int) -> np.ndarray:
        return self.values[t_q, :t_q]

    def lower_triangle(self) -> np.ndarray:
        return self.values[np.tril_indices(self.T, k=-1)]

    @classmethod
    def from_lower_triangle(cls, T: int, flat) -> "SimilarityMatrix":
        vals = np.full((T, T), np.nan)
        vals[np.tril_indices(T, k=-1)] = flat
        return cls(vals)


def _similarity_row(seq: PoseSequence, t_q: int, idx: np.ndarray, weighted: bool, allow_scale: bool) -> np.ndarray:
    target = seq.frames[t_q]
    row = np.empty(t_q)
    for t_k in range(t_q):
        source = seq.frames[t_k]
        w = target.confidence[idx] * source.confidence[idx] if weighted else None
        try:
            _, row[t_k] = rigid_align(source.points[idx], target.points[idx], w, allow_scale)
        except DegenerateError as exc:
            raise DegenerateError(f"frames ({t_q}, {t_k}): {exc}", frames=(t_q, t_k)) from exc
    return row


def similarity_matrix(seq: PoseSequence, cfg: GlobalMaskConfig | None = None, threads: int = 1) -> SimilarityMatrix:
    """Pairwise rigid-alignment residuals between each frame and its history.

    Rows are independent and may be computed on ``threads`` workers; the
    result does not depend on the worker count.  With
    ``cfg.weight_by_confidence`` each point is weighted by the product of its
    confidences in the two frames.
    """
    cfg = cfg or GlobalMaskConfig()
    T = seq.T
    idx = seq.layout.indices(cfg.groups)
    values = np.full((T, T), np.nan)

    def work(t_q):
        return t_q, _similarity_row(seq, t_q, idx, cfg.weight_by_confidence, cfg.allow_scale)

    if threads > 1 and T > 2:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(work, range(1, T)))
    else:
        rows = [work(t) for t in range(1, T)]
    for t_q, row in rows:
        values[t_q, :t_q] = row
    return SimilarityMatrix(values)


def select_topk(sim: SimilarityMatrix, cfg: GlobalMaskConfig) -> list[tuple[int, ...]]:
    """Admissible key frames per query frame: itself plus its K closest predecessors.

    Ranking is by residual, ties broken towards the more recent frame, so
    exactly ``min(K, t_q)`` predecessors are kept.
    """
    out = []
    for t_q in range(sim.T):
        row = sim.row(t_q)
        order = sorted(range(t_q), key=lambda t_k: (row[t_k], -t_k))
        out.append(tuple(sorted(order[: cfg.k] + [t_q])))
    return out


def frame_admissibility(admissible: Sequence[Sequence[int]]) -> np.ndarray:
    T = len(admissible)
    adm = np.zeros((T, T), dtype=bool)
    for t_q, keys in enumerate(admissible):
        adm[t_q, list(keys)] = True
    return adm


_SIM_MAGIC = b"PSSM"
_SIM_VERSION = 1


def save_similarity(sim: SimilarityMatrix, path) -> None:
    """Binary layout: ``b"PSSM"``, u32 version, u32 T, then the strict lower
    triangle row-major as little-endian float64."""
    tri = np.ascontiguousarray(sim.lower_triangle(), dtype="<f8")
    Path(path).write_bytes(_SIM_MAGIC + struct.pack("<II", _SIM_VERSION, sim.T) + tri.tobytes())


def load_similarity(path) -> SimilarityMatrix:
    data = Path(path).read_bytes()
    if data[:4] != _SIM_MAGIC or len(data) < 12:
        raise ParseError(f"{path}: not a similarity matrix file")
    version, T = struct.unpack_from("<II", data, 4)
    if version != _SIM_VERSION:
        raise FormatVersionError(f"{path}: unsupported similarity format version {version}")
    n = T * (T - 1) // 2
    if len(data) != 12 + 8 * n:
        raise ParseError(f"{path}: expected {n} float64 entries for T={T}")
    return SimilarityMatrix.from_lower_triangle(T, np.frombuffer(data, dtype="<f8", offset=12))
