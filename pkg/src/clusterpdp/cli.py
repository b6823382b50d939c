"""Command-line entry point: ``clusterpdp <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from clusterpdp import bench
from clusterpdp.errors import PdpError
from clusterpdp.instances import DISTRIBUTIONS, gen_dataset, save_dataset
from clusterpdp.trainer import TrainConfig, load_checkpoint, policy_gradcheck, train

GRADCHECK_TOLERANCE = 1e-3


def _gen(args) -> int:
    save_dataset(gen_dataset(args.n, args.dist, args.count, args.seed), args.out)
    print(f"wrote {args.count} instances to {args.out}")
    return 0


def _train(args) -> int:
    cfg = TrainConfig.from_file(args.config)
    out = args.out or Path(args.config).with_suffix("")
    result = train(cfg, out)
    last = result.epochs[-1] if result.epochs else {}
    print(json.dumps({"out": str(out), "final": last}))
    return 0


def _eval(args) -> int:
    params, cfg = load_checkpoint(args.ckpt)
    testset = bench.TestSet.load(args.testset)
    if args.decode == "greedy":
        report = bench.eval_greedy(params, cfg, testset, multi_start=not args.single_start, method=args.method)
    else:
        report = bench.eval_sampling(params, cfg, testset, args.samples, seed=args.seed, method=args.method)
    report.reference = bench.exact_reference(testset) if args.gap else None
    bench.write_results([report], args.out, append=not args.overwrite)
    gap = "" if report.gap_pct is None else f" gap {report.gap_pct:.2f}%"
    print(f"{report.method} {report.decode}: obj {report.mean_obj:.4f}{gap} ({report.mean_time_s * 1000:.2f} ms/inst)")
    return 0


def _oracle(args) -> int:
    testset = bench.TestSet.load(args.testset)
    reports = bench.oracle_reports(testset, args.methods)
    bench.write_results(reports, args.out, append=not args.overwrite)
    for r in reports:
        print(f"{r.method}: obj {r.mean_obj:.4f}")
    return 0


def _gradcheck(args) -> int:
    worst = 0.0
    for seed in range(args.seeds):
        err, where = policy_gradcheck(seed, ablation=args.ablation, h=args.h)
        worst = max(worst, err)
        print(f"seed {seed}: max rel err {err:.3e} ({where})")
    ok = worst <= GRADCHECK_TOLERANCE
    print(f"{'PASS' if ok else 'FAIL'} max rel err {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:g})")
    return 0 if ok else 1


def _report(args) -> int:
    rows = bench.summarize(bench.read_results(args.inputs))
    text = bench.format_summary(rows, args.format)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _matrix(args) -> int:
    result = bench.run_matrix(bench.MatrixSpec.from_file(args.spec), args.out)
    sys.stdout.write(bench.format_summary(result["summary"], "md"))
    if result["skipped"]:
        print("skipped:", ", ".join(result["skipped"]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clusterpdp", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a seeded instance set")
    g.add_argument("--n", type=int, required=True, help="number of pickup/delivery pairs")
    g.add_argument("--dist", choices=DISTRIBUTIONS, default="clustered")
    g.add_argument("--count", type=int, default=bench.DEFAULT_TEST_SIZE)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_gen)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="run directory (default: config path without suffix)")
    t.set_defaults(func=_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--testset", required=True)
    e.add_argument("--decode", choices=("greedy", "sample"), default="greedy")
    e.add_argument("--samples", type=int, default=1280)
    e.add_argument("--seed", type=int, default=0, help="sample stream seed")
    e.add_argument("--single-start", action="store_true", help="greedy from pickup 1 only")
    e.add_argument("--method", help="method label in the results file")
    e.add_argument("--gap", action="store_true", help="fill gap_pct against exact_dp (small n only)")
    e.add_argument("--overwrite", action="store_true")
    e.add_argument("--out", required=True, help="results CSV (appended)")
    e.set_defaults(func=_eval)

    o = sub.add_parser("oracle", help="exact and heuristic reference solutions")
    o.add_argument("--testset", required=True)
    o.add_argument("--methods", nargs="+", default=["exact", "greedy-nf"], choices=("exact", "greedy-nf"))
    o.add_argument("--overwrite", action="store_true")
    o.add_argument("--out", required=True)
    o.set_defaults(func=_oracle)

    c = sub.add_parser("gradcheck", help="autograd vs finite differences on the toy policy")
    c.add_argument("--seeds", type=int, default=10)
    c.add_argument("--ablation", default="full")
    c.add_argument("--h", type=float, default=1e-5)
    c.set_defaults(func=_gradcheck)

    r = sub.add_parser("report", help="summarize results CSVs")
    r.add_argument("--in", dest="inputs", nargs="+", required=True)
    r.add_argument("--format", choices=("csv", "md"), default="md")
    r.add_argument("--out")
    r.set_defaults(func=_report)

    m = sub.add_parser("matrix", help="run a train/test grid from a JSON spec")
    m.add_argument("--spec", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=_matrix)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (PdpError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
