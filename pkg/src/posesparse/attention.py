"""Masked attention: a dense reference and a block-sparse streaming-softmax executor."""

from __future__ import annotations

import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .alignment import GlobalMaskConfig
from .errors import ConfigError, EmptyRowError, LayoutMismatchError, ParseError
from .mask_builder import (
    DENSE_TOKEN_LIMIT,
    AttentionMask,
    BlockMode,
    BlockSparseLayout,
    build_mask,
    pool_to_blocks,
    sparsity_report,
)
from .regions import TokenGrid, label_sequence


@dataclass(frozen=True)
class AttentionInputs:
    q: np.ndarray  # (heads, T*N, head_dim) float32
    k: np.ndarray
    v: np.ndarray
    scale: float | None = None

    def __post_init__(self):
        for name in ("q", "k", "v"):
            arr = np.asarray(getattr(self, name), dtype=np.float32)
            if arr.ndim != 3:
                raise ValueError(f"{name} must be (heads, tokens, head_dim), got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, arr)
        if not (self.q.shape == self.k.shape == self.v.shape):
            raise ValueError(f"q, k, v shapes differ: {self.q.shape}, {self.k.shape}, {self.v.shape}")
        if self.scale is None:
            object.__setattr__(self, "scale", 1.0 / math.sqrt(self.head_dim))

    @property
    def heads(self) -> int:
        return self.q.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.q.shape[2]

    @classmethod
    def random(cls, heads, num_tokens, head_dim, seed=0) -> "AttentionInputs":
        rng = np.random.default_rng(seed)
        shape = (heads, num_tokens, head_dim)
        return cls(*(rng.standard_normal(shape, dtype=np.float32) for _ in range(3)))


@dataclass(frozen=True)
class AttentionOutput:
    o: np.ndarray  # (heads, T*N, head_dim) float32
    attended: np.ndarray  # (T*N,) number of keys each query row attended to


def dense_masked_attention(inp: AttentionInputs, mask, max_tokens: int = DENSE_TOKEN_LIMIT,
                           row_chunk: int = 1024) -> AttentionOutput:
    """softmax(scale * Q K^T + M) V, with the row max taken over admissible keys.

    ``mask`` is an AttentionMask, a dense ``(n, n)`` boolean array of
    admissible pairs, or None for no masking.  Computed in float64 and
    rounded to float32, ``row_chunk`` query rows at a time.
    """
    n = inp.num_tokens
    if isinstance(mask, np.ndarray):
        if mask.shape != (n, n):
            raise LayoutMismatchError(f"dense mask shape {mask.shape} does not match {n} tokens")
    elif mask is not None and mask.num_tokens != n:
        raise LayoutMismatchError(f"mask covers {mask.num_tokens} tokens, inputs have {n}")
    if n > max_tokens:
        raise ConfigError(f"dense oracle limited to {max_tokens} tokens, got {n}")
    q = inp.q.astype(np.float64)
    k = inp.k.astype(np.float64)
    v = inp.v.astype(np.float64)
    out = np.empty(q.shape, dtype=np.float32)
    attended = np.empty(n, dtype=np.int64)
    cols = np.arange(n)
    for r0 in range(0, n, row_chunk):
        rows = cols[r0:r0 + row_chunk]
        logits = np.einsum("hqd,hkd->hqk", q[:, rows], k) * inp.scale
        if mask is not None:
            allowed = mask[rows] if isinstance(mask, np.ndarray) else mask.token_mask(rows, cols)
            if not allowed.any(axis=1).all():
                raise EmptyRowError("a query row has no admissible keys")
            logits = np.where(allowed[None], logits, -np.inf)
            attended[rows] = allowed.sum(axis=1)
        else:
            attended[rows] = n
        logits -= logits.max(axis=-1, keepdims=True)
        p = np.exp(logits)
        out[:, rows] = (p @ v) / p.sum(axis=-1, keepdims=True)
    return AttentionOutput(out, attended)


def _block_row(inp, q, k, v, layout, mask, br, cols, exact):
    r0, r1 = layout.block_span(br)
    rows = np.arange(r0, r1)
    qb = q[:, r0:r1]
    H, rb, d = qb.shape
    m = np.full((H, rb), -np.inf)
    l = np.zeros((H, rb))
    acc = np.zeros((H, rb, d))
    attended = np.zeros(rb, dtype=np.int64)
    for bc in cols:
        c0, c1 = layout.block_span(int(bc))
        s = (qb @ k[:, c0:c1].transpose(0, 2, 1)) * inp.scale
        if exact:
            tm = mask.token_mask(rows, np.arange(c0, c1))
            s = np.where(tm[None], s, -np.inf)
            attended += tm.sum(axis=1)
        else:
            attended += c1 - c0
        m_new = np.maximum(m, s.max(axis=-1))
        live = np.isfinite(m_new)
        safe = np.where(live, m_new, 0.0)
        rescale = np.where(live, np.exp(m - safe), 0.0)
        p = np.exp(s - safe[..., None])  # masked entries give exp(-inf) = 0
        l = rescale * l + p.sum(axis=-1)
        acc = rescale[..., None] * acc + p @ v[:, c0:c1]
        m = m_new
    if np.any(l == 0):
        raise EmptyRowError(f"block row {br} has query rows with no admissible keys")
    return r0, r1, acc / l[..., None], attended


def block_sparse_attention(inp: AttentionInputs, layout: BlockSparseLayout, mask: AttentionMask | None = None,
                           threads: int = 1, shuffle_seed: int | None = None) -> AttentionOutput:
    """Attention restricted to the layout's active blocks.

    Each query block row streams over its active key blocks keeping a
    running max and running denominator, so the result does not depend on
    the order blocks are visited.  In exact mode the token mask is applied
    inside every block; in block-approx mode whole active blocks are
    attended.  ``shuffle_seed`` permutes the visiting order (for testing);
    ``threads`` spreads block rows over workers.
    """
    n = inp.num_tokens
    if layout.num_tokens != n:
        raise LayoutMismatchError(f"layout covers {layout.num_tokens} tokens, inputs have {n}")
    exact = layout.mode is BlockMode.EXACT
    if exact and mask is None:
        raise ConfigError("exact mode needs the token mask")
    if mask is not None and (mask.T, mask.N) != (layout.T, layout.N):
        raise LayoutMismatchError("mask and layout disagree on T or N")

    q = inp.q.astype(np.float64)
    k = inp.k.astype(np.float64)
    v = inp.v.astype(np.float64)
    by_row = layout.rows()
    missing = [b for b in range(layout.blocks_per_side) if b not in by_row]
    if missing:
        raise EmptyRowError(f"block rows without any active block: {missing[:5]}")
    rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
    jobs = []
    for br in range(layout.blocks_per_side):
        cols = by_row[br]
        if rng is not None:
            cols = rng.permutation(cols)
        jobs.append((br, cols))

    out = np.empty(q.shape, dtype=np.float32)
    attended = np.empty(n, dtype=np.int64)

    def run(job):
        return _block_row(inp, q, k, v, layout, mask, job[0], job[1], exact)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    for r0, r1, o, att in results:
        out[:, r0:r1] = o
        attended[r0:r1] = att
    return AttentionOutput(out, attended)


# ---------------------------------------------------------------------------
# benchmarking

BENCH_HEADER = "# posesparse-bench v1"
BENCH_COLUMNS = ("T", "N", "heads", "head_dim", "block_size", "mode", "median_ms", "repeats",
                 "token_density", "block_density", "flops")
DEFAULT_BENCH_SIZES = ((4, 256, 2, 32), (8, 256, 2, 32))


@dataclass(frozen=True)
class BenchRow:
    T: int
    N: int
    heads: int
    head_dim: int
    block_size: int
    mode: str  # "dense" | "block_sparse"
    median_ms: float
    repeats: int
    token_density: float
    block_density: float
    flops: int


def grid_for_tokens(N: int, patch_size: int | None = None) -> TokenGrid:
    """Most square token grid with exactly N tokens."""
    h = int(math.isqrt(N))
    while N % h:
        h -= 1
    w = N // h
    ps = patch_size or max(1, 512 // max(h, w))
    return TokenGrid(h, w, ps)


def synthetic_mask(T: int, N: int, cfg: GlobalMaskConfig, seed: int = 0, dilation: int = 1) -> AttentionMask:
    from .synthetic import talking_sequence

    grid = grid_for_tokens(N)
    width, height = grid.extent
    seq = talking_sequence(T, width=width, height=height, seed=seed)
    labels = label_sequence(seq, grid, dilation=dilation)
    return build_mask(seq, grid, cfg, labels)


def _median_ms(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def bench_attention(sizes: Iterable[Sequence[int]] = DEFAULT_BENCH_SIZES, cfg: GlobalMaskConfig = GlobalMaskConfig(),
                    repeats: int = 3, block_size: int = 128, seed: int = 0, threads: int = 1) -> list[BenchRow]:
    """Time dense vs exact block-sparse attention on synthetic pose masks."""
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    rows = []
    for T, N, heads, head_dim in sizes:
        mask = synthetic_mask(T, N, cfg, seed=seed)
        layout = pool_to_blocks(mask, block_size, BlockMode.EXACT)
        rep = sparsity_report(layout, mask, head_dim, heads)
        inp = AttentionInputs.random(heads, T * N, head_dim, seed=seed)
        dense_ms = _median_ms(lambda: dense_masked_attention(inp, mask, max_tokens=math.inf), repeats)
        sparse_ms = _median_ms(lambda: block_sparse_attention(inp, layout, mask, threads=threads), repeats)
        common = dict(T=T, N=N, heads=heads, head_dim=head_dim, block_size=block_size, repeats=repeats)
        rows.append(BenchRow(mode="dense", median_ms=dense_ms, token_density=1.0, block_density=1.0,
                             flops=rep.dense_attention_flops, **common))
        rows.append(BenchRow(mode="block_sparse", median_ms=sparse_ms, token_density=rep.token_pair_density,
                             block_density=rep.block_density, flops=rep.estimated_attention_flops, **common))
    return rows


def format_bench_table(rows: Iterable[BenchRow]) -> str:
    """Tab-separated table: a version comment, a column header, one line per row."""
    lines = [BENCH_HEADER, "\t".join(BENCH_COLUMNS)]
    for r in rows:
        lines.append("\t".join([str(r.T), str(r.N), str(r.heads), str(r.head_dim), str(r.block_size), r.mode,
                                f"{r.median_ms:.4f}", str(r.repeats), repr(r.token_density),
                                repr(r.block_density), str(r.flops)]))
    return "\n".join(lines) + "\n"


def parse_bench_table(text: str) -> list[BenchRow]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != BENCH_HEADER:
        raise ParseError("missing or unsupported bench table header")
    if len(lines) < 2 or tuple(lines[1].split("\t")) != BENCH_COLUMNS:
        raise ParseError("bench table column header does not match")
    rows = []
    for lineno, line in enumerate(lines[2:], start=3):
        parts = line.split("\t")
        if len(parts) != len(BENCH_COLUMNS):
            raise ParseError(f"line {lineno}: expected {len(BENCH_COLUMNS)} fields")
        try:
            T, N, heads, d, bs = (int(x) for x in parts[:5])
            mode = parts[5]
            if mode not in ("dense", "block_sparse"):
                raise ValueError(mode)
            rows.append(BenchRow(T, N, heads, d, bs, mode, float(parts[6]), int(parts[7]),
                                 float(parts[8]), float(parts[9]), int(parts[10])))
        except ValueError as exc:
            raise ParseError(f"line {lineno}: bad field ({exc})") from exc
    return rows
