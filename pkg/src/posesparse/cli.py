"""``posesparse`` command-line front end.

Every subcommand is deterministic given ``--seed``; ``--threads`` changes
only how work is scheduled, never the numbers written.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .alignment import GlobalMaskConfig, load_similarity, save_similarity, similarity_matrix
from .attention import DEFAULT_BENCH_SIZES, bench_attention, format_bench_table
from .dmd_toy import GaussianDistribution, StudentGenerator, format_trajectory, train_student
from .errors import EXIT_CODES, EXIT_IO, ConfigError, PosesparseError
from .mask_builder import build_mask, pool_to_blocks, save_layout, sparsity_report
from .pose_io import FilterPolicy, filter_frames, load_pose_sequence, save_pose_sequence
from .region_loss import ImagePair, RegionLossConfig, load_raster, rasterize_labels, region_loss
from .regions import REGIONS, RegionLabel, TokenGrid, label_sequence, label_tokens, save_labeling
from .segmenter import fuse, fusion_weights, plan_segments

log = logging.getLogger("posesparse")

EXIT_THRESHOLD = 7
_EXIT_TABLE = {**EXIT_CODES, EXIT_THRESHOLD: "demo finished but missed its pass threshold"}

UNVALIDATED = "(unvalidated default)"


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return value


def _region(name: str) -> RegionLabel:
    try:
        label = RegionLabel[name.upper()]
    except KeyError:
        raise ConfigError(f"unknown region {name!r}; choose from {[r.name.lower() for r in REGIONS]}") from None
    if label is RegionLabel.BACKGROUND:
        raise ConfigError("background has no loss term")
    return label


def _pairs(items, conv):
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"expected REGION=VALUE, got {item!r}")
        out[_region(key)] = conv(value)
    return out


def cmd_filter(args) -> int:
    policy = FilterPolicy(args.face_conf_min, args.body_conf_min, args.visibility_min)
    seq = load_pose_sequence(args.pose_in)
    kept, report = filter_frames(seq, policy)
    save_pose_sequence(kept, args.pose_out)
    if args.report:
        _write_json(args.report, report.as_dict())
    print(f"kept {report.kept}/{len(report.verdicts)} frames")
    for v in report.rejected:
        print(f"  frame {v.source_index}: {', '.join(v.reasons)}")
    return 0


def cmd_mask(args) -> int:
    cfg = GlobalMaskConfig(k=args.k, weight_by_confidence=args.weight_by_confidence)
    if args.block_size < 1 or args.patch_size < 1:
        raise ConfigError("block size and patch size must be >= 1")
    seq = load_pose_sequence(args.pose_in)
    if seq.T == 0:
        raise ConfigError("pose file has no frames")
    grid = TokenGrid.for_image(seq.image_size, args.patch_size)
    sim = None
    if args.similarity_cache and Path(args.similarity_cache).exists():
        sim = load_similarity(args.similarity_cache)
    if sim is None:
        sim = similarity_matrix(seq, cfg, threads=args.threads)
        if args.similarity_cache:
            save_similarity(sim, args.similarity_cache)
    labels = label_sequence(seq, grid, dilation=args.dilation, mode=args.label_mode.replace("-", "_"),
                            fallback_conf=args.mls_fallback)
    mask = build_mask(seq, grid, cfg, labels, sim=sim)
    layout = pool_to_blocks(mask, args.block_size, args.mode)
    save_layout(layout, args.out)
    if args.labels_out:
        save_labeling(labels, args.labels_out)
    if args.labels_dump:
        Path(args.labels_dump).write_text(labels.dump_text())
    report = sparsity_report(layout, mask, args.head_dim, args.heads)
    if args.report:
        out = report.as_dict()
        out.update(T=mask.T, N=mask.N, block_size=layout.block_size, mode=layout.mode.label, k=cfg.k)
        _write_json(args.report, out)
    print(f"T={mask.T} N={mask.N} grid={grid.height_tokens}x{grid.width_tokens} K={cfg.k} "
          f"block={layout.block_size} mode={layout.mode.label}")
    print(report.table())
    return 0


def _parse_sizes(text: str):
    sizes = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = [int(p) for p in chunk.split(",")]
        if len(parts) != 4 or min(parts) < 1:
            raise ConfigError(f"size {chunk!r} must be four positive integers T,N,heads,head_dim")
        sizes.append(tuple(parts))
    if not sizes:
        raise ConfigError("no benchmark sizes given")
    return sizes


def cmd_bench(args) -> int:
    sizes = _parse_sizes(args.sizes) if args.sizes else list(DEFAULT_BENCH_SIZES)
    cfg = GlobalMaskConfig(k=args.k)
    rows = bench_attention(sizes, cfg, repeats=args.repeats, block_size=args.block_size, seed=args.seed,
                           threads=args.threads)
    table = format_bench_table(rows)
    if args.out:
        Path(args.out).write_text(table)
    sys.stdout.write(table)
    return 0


def cmd_loss(args) -> int:
    weights = {r: 1.0 for r in REGIONS}
    weights.update(_pairs(args.weight, float))
    metrics = {r: "mse" for r in REGIONS}
    metrics.update(_pairs(args.metric, str))
    cfg = RegionLossConfig(weights, metrics, args.lambda_region, args.normalize)
    x = load_raster(args.x)
    x_hat = load_raster(args.x_hat)
    pair = ImagePair(x, x_hat)
    seq = load_pose_sequence(args.pose)
    if not 0 <= args.frame < seq.T:
        raise ConfigError(f"frame {args.frame} outside 0..{seq.T - 1}")
    h, w = x.shape[:2]
    grid = TokenGrid.for_image((w, h), args.patch_size)
    labels = label_tokens(seq.frames[args.frame], grid, args.dilation, image_size=(w, h))
    masks = rasterize_labels(labels, grid, (w, h))
    total, per_region = region_loss(pair, masks, cfg)
    result = {
        "format": "posesparse-region-loss",
        "version": 1,
        "total": total,
        "weighted_total": cfg.lambda_region * total,
        "lambda_region": cfg.lambda_region,
        "per_region": {r.name.lower(): v for r, v in per_region.items()},
        "weights": {r.name.lower(): v for r, v in weights.items()},
        "metrics": {r.name.lower(): v for r, v in metrics.items()},
    }
    if args.out:
        _write_json(args.out, result)
    print(f"region loss {total:.6g}")
    for name, value in result["per_region"].items():
        print(f"  {name:<10} {value:.6g}")
    return 0


def demo_teacher(d: int, seed: int) -> GaussianDistribution:
    if d == 2:
        return GaussianDistribution([1.0, -1.0], np.diag([0.5, 2.0]))
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(d, d))
    return GaussianDistribution(rng.normal(size=d), L @ L.T / d + 0.5 * np.eye(d))


def cmd_dmd_demo(args) -> int:
    if args.lr <= 0:
        raise ConfigError("learning rate must be > 0")
    if args.d < 1:
        raise ConfigError("dimension must be >= 1")
    teacher = demo_teacher(args.d, args.seed)
    traj = train_student(StudentGenerator.standard(args.d), teacher, steps=args.steps, lr=args.lr,
                         batch=args.batch, seed=args.seed, threads=args.threads)
    text = format_trajectory(traj)
    if args.out:
        Path(args.out).write_text(text)
    final = traj[-1].kl
    verdict = "PASS" if final < args.kl_threshold else "FAIL"
    print(f"initial reverse KL {traj[0].kl:.6g}, final {final:.6g} after {args.steps} steps: {verdict}")
    return 0 if verdict == "PASS" else EXIT_THRESHOLD


def cmd_fuse_demo(args) -> int:
    plan = plan_segments(args.T, args.segment_length, args.overlap)
    rng = np.random.default_rng(args.seed)
    frames = np.arange(args.T)[:, None]
    truth = np.sin(0.2 * frames + np.arange(args.channels)[None, :])
    segments = [truth[s:e] + rng.normal(0.0, args.noise, size=(e - s, args.channels)) for s, e in plan.segments]
    fused = fuse(segments, plan)
    weights = fusion_weights(plan)
    result = {
        "format": "posesparse-fuse-demo",
        "version": 1,
        "plan": plan.as_dict(),
        "weights": [[[s, str(w)] for s, w in entries] for entries in weights.per_frame],
        "fused": fused.tolist(),
        "max_abs_error": float(np.abs(fused - truth).max()),
    }
    if args.out:
        _write_json(args.out, result)
    print(f"{len(plan.segments)} segments: {list(plan.segments)}")
    print(f"max |fused - truth| = {result['max_abs_error']:.4g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--threads", type=_positive_int, default=1, help="worker threads (default 1)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    codes = "\n".join(f"  {k}  {v}" for k, v in sorted(_EXIT_TABLE.items()))
    parser = argparse.ArgumentParser(
        prog="posesparse",
        description="Pose-conditioned sparse attention tools.",
        epilog=f"exit codes:\n{codes}",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("filter", parents=[common], help="drop frames with unreliable keypoints")
    p.add_argument("pose_in")
    p.add_argument("pose_out")
    p.add_argument("--face-conf-min", type=float, default=0.9, help="minimum face confidence must exceed this (0.9)")
    p.add_argument("--body-conf-min", type=float, default=0.8, help="mean upper-body confidence must exceed this (0.8)")
    p.add_argument("--visibility-min", type=float, default=0.9,
                   help="fraction of visible upper-body keypoints must reach this (0.9)")
    p.add_argument("--report", help="write the per-frame report as JSON")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("mask", parents=[common], help="build the sparse attention layout for a pose file")
    p.add_argument("pose_in")
    p.add_argument("--out", required=True, help="block layout output file")
    p.add_argument("--k", type=int, default=4, help=f"similar past frames per frame (4) {UNVALIDATED}")
    p.add_argument("--patch-size", type=int, default=16, help=f"pixels per token side (16) {UNVALIDATED}")
    p.add_argument("--dilation", type=int, default=1, help=f"region dilation in tokens (1) {UNVALIDATED}")
    p.add_argument("--block-size", type=int, default=128, help="attention block size (128)")
    p.add_argument("--mode", choices=["exact", "block-approx"], default="exact")
    p.add_argument("--label-mode", choices=["per-frame", "reference"], default="per-frame")
    p.add_argument("--mls-fallback", type=float, default=0.3,
                   help=f"re-estimate keypoints below this confidence by MLS (0.3) {UNVALIDATED}")
    p.add_argument("--weight-by-confidence", action="store_true")
    p.add_argument("--heads", type=_positive_int, default=1, help="heads used for FLOP estimates (1)")
    p.add_argument("--head-dim", type=_positive_int, default=64, help="head dimension for FLOP estimates (64)")
    p.add_argument("--report", help="write the sparsity report as JSON")
    p.add_argument("--labels-out", help="write region labels (binary)")
    p.add_argument("--labels-dump", help="write region labels as a text grid")
    p.add_argument("--similarity-cache", help="read/write the pose similarity matrix here")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("bench", parents=[common], help="time dense vs block-sparse attention")
    p.add_argument("--sizes", help="semicolon-separated T,N,heads,head_dim tuples (default 4,256,2,32;8,256,2,32)")
    p.add_argument("--repeats", type=_positive_int, default=3)
    p.add_argument("--k", type=_positive_int, default=4, help=f"similar past frames per frame (4) {UNVALIDATED}")
    p.add_argument("--block-size", type=_positive_int, default=128)
    p.add_argument("--out", help="write the table here as well as to stdout")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("loss", parents=[common], help="region-weighted reconstruction loss for one frame")
    p.add_argument("--x", required=True, help="ground-truth raster")
    p.add_argument("--x-hat", required=True, help="generated raster")
    p.add_argument("--pose", required=True, help="pose file supplying the regions")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--patch-size", type=int, default=16, help=f"pixels per token side (16) {UNVALIDATED}")
    p.add_argument("--dilation", type=int, default=1)
    p.add_argument("--weight", action="append", metavar="REGION=W",
                   help=f"per-region weight, repeatable (all 1.0) {UNVALIDATED}")
    p.add_argument("--metric", action="append", metavar="REGION=ID", help="per-region metric id (mse)")
    p.add_argument("--lambda-region", type=float, default=1.0, help=f"objective weight (1.0) {UNVALIDATED}")
    p.add_argument("--normalize", action="store_true", help="average over region pixels instead of the full image")
    p.add_argument("--out", help="write the result as JSON")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("dmd-demo", parents=[common], help="distil a Gaussian student with the DMD gradient")
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch", type=_positive_int, default=1024)
    p.add_argument("--kl-threshold", type=float, default=0.01)
    p.add_argument("--out", help="write the (step, reverse_kl) trajectory")
    p.set_defaults(func=cmd_dmd_demo)

    p = sub.add_parser("fuse-demo", parents=[common], help="segment a noisy signal and fuse the overlaps")
    p.add_argument("--T", type=_positive_int, default=40)
    p.add_argument("--segment-length", type=int, default=16, help=f"(16) {UNVALIDATED}")
    p.add_argument("--overlap", type=int, default=4, help=f"(4) {UNVALIDATED}")
    p.add_argument("--channels", type=_positive_int, default=3)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--out", help="write plan, weights and fused values as JSON")
    p.set_defaults(func=cmd_fuse_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except PosesparseError as exc:
        print(f"posesparse {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"posesparse {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
