"""Command-line entry point: ``gaitfuse <command> [flags]``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O failure,
4 data format error, 5 contract violation.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import describe_keys, load_config
from .errors import ConfigError, ContractViolation, FormatError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_CONTRACT = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x44, got {text!r}")
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def cmd_gen_data(args):
    from .synthgait import CorruptionSpec, build_dataset

    corruption = None
    if args.corrupt:
        try:
            corruption = CorruptionSpec.from_json(args.corrupt)
        except (KeyError, TypeError, ValueError) as exc:  # JSONDecodeError is a ValueError
            raise FormatError(f"{args.corrupt}: bad corruption spec ({exc})") from exc
    if min(args.identities, args.seqs, args.frames) < 1:
        raise UsageError("--identities, --seqs and --frames must be at least 1")
    build_dataset(args.identities, args.seqs, args.frames, args.out, seed=args.seed,
                  corruption=corruption, size=args.size)
    print(Path(args.out) / "manifest.json")
    return EXIT_OK


def cmd_heatmap(args):
    from .heatmap import (SkeletonTopology, default_topology, naive_stack_sequence, read_pose_jsonl,
                          stack_sequence, write_heatmap_bin)

    if not args.sigma > 0:
        raise UsageError(f"--sigma must be positive, got {args.sigma}")
    topo = SkeletonTopology.from_json(args.topology) if args.topology else default_topology()
    poses = read_pose_jsonl(args.poses, topo.joint_count)
    H, W = args.size
    vol = stack_sequence(poses, topo, args.sigma, H, W)
    write_heatmap_bin(vol, args.out)
    print("T={} K={} H={} W={}".format(*vol.shape))
    if args.verify_oracle:
        diff = float(np.max(np.abs(vol - naive_stack_sequence(poses, topo, args.sigma, H, W))))
        print(f"oracle max abs diff {diff:.3e}")
        if diff > 1e-12:
            raise ContractViolation(f"heatmap differs from the per-pixel oracle by {diff:.3e}")
    return EXIT_OK


def cmd_train(args):
    from .trainer import train

    cfg = load_config(args.config, args.set)
    if not (Path(args.data) / "manifest.json").exists():
        raise FileNotFoundError(f"no manifest.json under {args.data}")
    try:
        t = train(cfg, args.data, args.out, resume=args.resume)
    except ValueError as exc:  # dataset/config combinations rejected before the first step
        if isinstance(exc, (FormatError, ConfigError)):
            raise
        raise UsageError(str(exc)) from exc
    print(Path(args.out) / "final.gmck", f"iterations={t.iteration}")
    return EXIT_OK


def cmd_eval(args):
    from .data import dataset_for_config
    from .eval import embed_dataset, evaluate, write_embeddings, write_report
    from .trainer import load_checkpoint, model_from_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    cfg = model.cfg
    ds = dataset_for_config(args.data, cfg)
    trained = ckpt.extra.get("labels", [])
    labels = [l for l in ds.labels if l not in set(trained)] if cfg.data.train_identities else ds.labels
    if not labels:
        raise UsageError("no held-out identities left to evaluate")
    records = embed_dataset(model, ds, labels, frames=cfg.data.eval_frames)
    try:
        report = evaluate(records)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    report.update({"checkpoint": str(args.checkpoint), "iteration": ckpt.iteration,
                   "identities": [int(l) for l in labels],
                   "split": "held-out identities" if cfg.data.train_identities else "all identities"})
    write_report(report, args.report)
    if args.embeddings:
        write_embeddings(records, args.embeddings)
    print(" ".join(f"{k}={report[k]:.4f}" for k in ("rank1", "rank5", "mAP", "mINP")))
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradsuite import run_suite

    results = run_suite(seed=args.seed, model_probes=args.probes)
    failed = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status:4s} {r.name:24s} probes={len(r.probes):4d} worst_rel_err={r.worst_error:.2e}")
    total = sum(len(r.probes) for r in results)
    print(f"{len(results) - failed}/{len(results)} cases passed, {total} probes (float64)")
    if failed:
        raise ContractViolation(f"{failed} gradient case(s) failed")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(
        prog="gaitfuse",
        description="Silhouette + skeleton gait recognition on synthetic walkers.",
        epilog="exit codes: 0 ok, 2 usage/config, 3 I/O, 4 data format, 5 contract violation",
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="build a synthetic walker dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--identities", type=int, default=8)
    g.add_argument("--seqs", type=int, default=4, help="sequences per identity")
    g.add_argument("--frames", type=int, default=24, help="frames per sequence")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt", help="JSON corruption spec (occlusions, dropout, confidence_noise)")
    g.add_argument("--size", type=_size, default=(64, 44), help="frame size HxW (default 64x44)")
    g.set_defaults(func=cmd_gen_data)

    h = sub.add_parser("heatmap", help="joint+limb heatmap volume from a pose JSON-lines file")
    h.add_argument("--poses", required=True)
    h.add_argument("--topology", help="topology JSON (default: built-in 17 joints / 12 limbs)")
    h.add_argument("--sigma", type=float, default=2.0)
    h.add_argument("--size", type=_size, default=(64, 44), help="HxW (default 64x44)")
    h.add_argument("--out", required=True, help="output GMHM file")
    h.add_argument("--verify-oracle", action="store_true", help="compare against the per-pixel reference")
    h.set_defaults(func=cmd_heatmap)

    t = sub.add_parser("train", help="train a model", formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog="config keys (key=value lines in --config, or --set key=value):\n" + describe_keys())
    t.add_argument("--config", help="run config file")
    t.add_argument("--data", required=True, help="dataset directory (with manifest.json)")
    t.add_argument("--out", required=True, help="directory for checkpoints and metrics.jsonl")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="output JSON report")
    e.add_argument("--embeddings", help="optional JSON-lines embedding dump")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and the composed model")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--fp64", action="store_true", help="float64 checks (always on; kept for explicitness)")
    c.add_argument("--probes", type=int, default=200, help="random probes on the composed model")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
