"""Factored attention masks, OR-pooled block layouts and cost accounting.

A mask entry ``(t_q, i, t_k, j)`` is admissible (logit offset 0) iff frame
``t_k`` is admissible for ``t_q`` and either ``t_q == t_k`` or tokens ``i`` and
``j`` carry the same non-background region label in their own frames.
Everything else is ``-inf``.  Tokens are flattened frame-major:
``flat = t * N + i``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .alignment import GlobalMaskConfig, SimilarityMatrix, frame_admissibility, select_topk, similarity_matrix
from .errors import ConfigError, DimensionMismatchError, FormatVersionError, ParseError
from .pose_io import PoseSequence
from .regions import RegionLabel, RegionLabeling, TokenGrid

DENSE_TOKEN_LIMIT = 4096


class BlockMode(enum.IntEnum):
    EXACT = 0
    BLOCK_APPROX = 1

    @classmethod
    def parse(cls, value) -> "BlockMode":
        if isinstance(value, BlockMode):
            return value
        key = str(value).lower().replace("-", "_")
        if key == "exact":
            return cls.EXACT
        if key in ("block_approx", "approx"):
            return cls.BLOCK_APPROX
        raise ConfigError(f"unknown block mode {value!r}")

    @property
    def label(self) -> str:
        return "exact" if self is BlockMode.EXACT else "block-approx"


@dataclass(frozen=True)
class AttentionMask:
    frame_admissibility: np.ndarray  # (T, T) bool, diagonal set, upper triangle clear
    region_labels: RegionLabeling

    @property
    def T(self) -> int:
        return int(self.frame_admissibility.shape[0])

    @property
    def N(self) -> int:
        return self.region_labels.N

    @property
    def num_tokens(self) -> int:
        return self.T * self.N

    def allowed(self, t_q: int, i: int, t_k: int, j: int) -> bool:
        if not self.frame_admissibility[t_q, t_k]:
            return False
        if t_q == t_k:
            return True
        li = self.region_labels.labels[t_q, i]
        return bool(li != RegionLabel.BACKGROUND and li == self.region_labels.labels[t_k, j])

    def entry(self, t_q: int, i: int, t_k: int, j: int) -> float:
        return 0.0 if self.allowed(t_q, i, t_k, j) else -np.inf

    def frame_pair(self, t_q: int, t_k: int) -> np.ndarray:
        """(N, N) admissibility between the tokens of two frames."""
        N = self.N
        if not self.frame_admissibility[t_q, t_k]:
            return np.zeros((N, N), dtype=bool)
        if t_q == t_k:
            return np.ones((N, N), dtype=bool)
        lq = self.region_labels.labels[t_q][:, None]
        return (lq == self.region_labels.labels[t_k][None, :]) & (lq != RegionLabel.BACKGROUND)

    def token_mask(self, rows, cols) -> np.ndarray:
        """Admissibility of flat query tokens ``rows`` against flat key tokens ``cols``."""
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        N = self.N
        tq, i = np.divmod(rows, N)
        tk, j = np.divmod(cols, N)
        lab = self.region_labels.labels
        lq = lab[tq, i][:, None]
        same_region = (lq == lab[tk, j][None, :]) & (lq != RegionLabel.BACKGROUND)
        same_frame = tq[:, None] == tk[None, :]
        return self.frame_admissibility[tq[:, None], tk[None, :]] & (same_frame | same_region)

    def dense(self, max_tokens: int = DENSE_TOKEN_LIMIT) -> np.ndarray:
        """Materialized (T*N, T*N) boolean mask; refused above ``max_tokens``."""
        n = self.num_tokens
        if n > max_tokens:
            raise ConfigError(f"refusing to materialize a dense mask over {n} tokens (limit {max_tokens})")
        idx = np.arange(n)
        return self.token_mask(idx, idx)

    def admitted_pairs(self) -> int:
        """Exact number of admissible token pairs, from the factored form."""
        counts = self.region_labels.region_counts().astype(object)  # Python ints, no overflow
        counts[:, RegionLabel.BACKGROUND] = 0
        N = self.N
        total = 0
        for t_q, t_k in zip(*np.nonzero(self.frame_admissibility)):
            if t_q == t_k:
                total += N * N
            else:
                total += int((counts[t_q] * counts[t_k]).sum())
        return total


def build_mask(seq: PoseSequence, grid: TokenGrid, cfg: GlobalMaskConfig, regions: RegionLabeling,
               sim: SimilarityMatrix | None = None, threads: int = 1) -> AttentionMask:
    """Combine the top-K frame mask with the region mask for ``seq``."""
    if regions.T != seq.T:
        raise DimensionMismatchError(f"labeling has {regions.T} frames, sequence has {seq.T}")
    if regions.N != grid.N or regions.grid != grid:
        raise DimensionMismatchError(f"labeling grid {regions.grid} differs from {grid}")
    if sim is None:
        sim = similarity_matrix(seq, cfg, threads=threads)
    elif sim.T != seq.T:
        raise DimensionMismatchError(f"similarity matrix has {sim.T} frames, sequence has {seq.T}")
    adm = frame_admissibility(select_topk(sim, cfg))
    adm.flags.writeable = False
    return AttentionMask(adm, regions)


@dataclass(frozen=True)
class BlockSparseLayout:
    T: int
    N: int
    block_size: int
    mode: BlockMode
    active_blocks: np.ndarray  # (n_active, 2) uint32 (block_row, block_col), lexicographically sorted

    @property
    def num_tokens(self) -> int:
        return self.T * self.N

    @property
    def blocks_per_side(self) -> int:
        return -(-self.num_tokens // self.block_size)

    @property
    def block_density(self) -> float:
        total = self.blocks_per_side ** 2
        return len(self.active_blocks) / total if total else 0.0

    def block_span(self, b: int) -> tuple[int, int]:
        start = b * self.block_size
        return start, min(start + self.block_size, self.num_tokens)

    def rows(self) -> dict[int, np.ndarray]:
        """Active block columns grouped by block row, columns ascending."""
        out: dict[int, np.ndarray] = {}
        if len(self.active_blocks) == 0:
            return out
        br = self.active_blocks[:, 0]
        cuts = np.flatnonzero(np.diff(br)) + 1
        for chunk in np.split(self.active_blocks, cuts):
            out[int(chunk[0, 0])] = chunk[:, 1].astype(np.int64)
        return out

    def computed_pairs(self) -> int:
        """Token pairs inside active blocks (edge blocks may be partial)."""
        spans = np.array([self.block_span(b)[1] - self.block_span(b)[0] for b in range(self.blocks_per_side)],
                         dtype=np.int64)
        if len(self.active_blocks) == 0:
            return 0
        ab = self.active_blocks.astype(np.int64)
        return int((spans[ab[:, 0]] * spans[ab[:, 1]]).sum())

    def with_mode(self, mode) -> "BlockSparseLayout":
        return BlockSparseLayout(self.T, self.N, self.block_size, BlockMode.parse(mode), self.active_blocks)


def pool_to_blocks(mask: AttentionMask, block_size: int = 128, mode="exact") -> BlockSparseLayout:
    """OR-pool the token mask into ``block_size`` tiles.

    A tile is active iff it contains at least one admissible token pair.
    Works frame pair by frame pair, so the dense mask is never built.
    """
    if block_size < 1:
        raise ConfigError("block_size must be >= 1")
    mode = BlockMode.parse(mode)
    N, n = mask.N, mask.num_tokens
    nb = -(-n // block_size)
    active = np.zeros((nb, nb), dtype=bool)

    def cuts(offset):
        # local starts of each block segment inside a frame's token range
        first = offset // block_size
        last = (offset + N - 1) // block_size
        starts = [0] + [b * block_size - offset for b in range(first + 1, last + 1)]
        return first, last, np.array(starts)

    for t_q, t_k in zip(*np.nonzero(mask.frame_admissibility)):
        tile = mask.frame_pair(t_q, t_k)
        if not tile.any():
            continue
        r_first, r_last, r_starts = cuts(t_q * N)
        c_first, c_last, c_starts = cuts(t_k * N)
        pooled = np.logical_or.reduceat(np.logical_or.reduceat(tile, r_starts, axis=0), c_starts, axis=1)
        active[r_first:r_last + 1, c_first:c_last + 1] |= pooled
    blocks = np.argwhere(active).astype(np.uint32)
    return BlockSparseLayout(mask.T, N, block_size, mode, blocks)


def dense_layout(T: int, N: int, block_size: int, mode="block_approx") -> BlockSparseLayout:
    nb = -(-(T * N) // block_size)
    rr, cc = np.meshgrid(np.arange(nb), np.arange(nb), indexing="ij")
    return BlockSparseLayout(T, N, block_size, BlockMode.parse(mode),
                             np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.uint32))


@dataclass(frozen=True)
class SparsityReport:
    token_pair_density: float
    block_density: float
    estimated_attention_flops: int
    dense_attention_flops: int
    admitted_pairs: int
    total_pairs: int
    active_blocks: int
    total_blocks: int
    token_level_flops: int

    def as_dict(self) -> dict:
        return {
            "format": "posesparse-sparsity-report",
            "version": 1,
            "token_pair_density": self.token_pair_density,
            "block_density": self.block_density,
            "estimated_attention_flops": self.estimated_attention_flops,
            "dense_attention_flops": self.dense_attention_flops,
            "token_level_flops": self.token_level_flops,
            "admitted_pairs": self.admitted_pairs,
            "total_pairs": self.total_pairs,
            "active_blocks": self.active_blocks,
            "total_blocks": self.total_blocks,
        }

    def table(self) -> str:
        rows = [
            ("token pair density", f"{self.token_pair_density:.6f}"),
            ("block density", f"{self.block_density:.6f}"),
            ("admitted pairs", f"{self.admitted_pairs} / {self.total_pairs}"),
            ("active blocks", f"{self.active_blocks} / {self.total_blocks}"),
            ("block-sparse FLOPs", f"{self.estimated_attention_flops:.4e}"),
            ("token-level FLOPs", f"{self.token_level_flops:.4e}"),
            ("dense FLOPs", f"{self.dense_attention_flops:.4e}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def attention_flops(pairs: int, head_dim: int, num_heads: int) -> int:
    """4 * d FLOPs per attended pair and head: QK^T and AV, one multiply-add each."""
    return 4 * head_dim * pairs * num_heads


def sparsity_report(layout: BlockSparseLayout, mask: AttentionMask, head_dim: int, num_heads: int) -> SparsityReport:
    """Exact density counts and FLOP estimates.

    ``estimated_attention_flops`` charges every token pair inside an active
    block, which is what a block-sparse kernel computes; ``token_level_flops``
    charges only admissible pairs.
    """
    if layout.T != mask.T or layout.N != mask.N:
        raise DimensionMismatchError("layout and mask disagree on T or N")
    n = mask.num_tokens
    total = n * n
    admitted = mask.admitted_pairs()
    computed = layout.computed_pairs()
    return SparsityReport(
        token_pair_density=admitted / total,
        block_density=layout.block_density,
        estimated_attention_flops=attention_flops(computed, head_dim, num_heads),
        dense_attention_flops=attention_flops(total, head_dim, num_heads),
        admitted_pairs=admitted,
        total_pairs=total,
        active_blocks=len(layout.active_blocks),
        total_blocks=layout.blocks_per_side ** 2,
        token_level_flops=attention_flops(admitted, head_dim, num_heads),
    )


_BL_MAGIC = b"PSBL"
_BL_VERSION = 1


def save_layout(layout: BlockSparseLayout, path) -> None:
    """Binary layout: ``b"PSBL"``, u32 version, u32 T, u32 N, u32 block size,
    u32 mode (0 exact, 1 block-approx), u32 count, then ``count`` sorted
    (row, col) pairs of little-endian u32."""
    head = struct.pack("<IIIIII", _BL_VERSION, layout.T, layout.N, layout.block_size, int(layout.mode),
                       len(layout.active_blocks))
    body = np.ascontiguousarray(layout.active_blocks, dtype="<u4").tobytes()
    Path(path).write_bytes(_BL_MAGIC + head + body)


def load_layout(path) -> BlockSparseLayout:
    data = Path(path).read_bytes()
    if data[:4] != _BL_MAGIC or len(data) < 28:
        raise ParseError(f"{path}: not a block layout file")
    version, T, N, bs, mode, count = struct.unpack_from("<IIIIII", data, 4)
    if version != _BL_VERSION:
        raise FormatVersionError(f"{path}: unsupported layout format version {version}")
    if len(data) != 28 + 8 * count:
        raise ParseError(f"{path}: block list length does not match header")
    blocks = np.frombuffer(data, dtype="<u4", offset=28).reshape(count, 2).astype(np.uint32)
    try:
        mode = BlockMode(mode)
    except ValueError as exc:
        raise ParseError(f"{path}: unknown block mode {mode}") from exc
    return BlockSparseLayout(T, N, bs, mode, blocks)
