"""Command-line front end.

Subcommands: train, sweep-classes, compare, analyze, grad-check.
Exit codes: 0 success, 2 usage or configuration error, 3 runtime fault.
Run directories are append-only under --output-root (or $NOVAUG_OUTPUT_ROOT,
default ./runs).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig
from .data import ParseError, SpecError
from .optim import OptimizerFault
from .pipeline import TrainingDiverged, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _output_root(args):
    if args.output_root:
        return Path(args.output_root)
    return Path(os.environ.get("NOVAUG_OUTPUT_ROOT", "runs"))


def _load_config(args):
    return ExperimentConfig.from_file(args.config, overrides=args.set or [])


def _parse_int_csv(text):
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_train(args):
    config = _load_config(args)
    from .experiments import make_run_dir

    run_dir = make_run_dir(_output_root(args), config.method, config.seed)
    result = run_experiment(config, out_dir=run_dir)
    print(f"run directory: {run_dir}")
    for k in sorted(result.recalls):
        print(f"recall@{k}: {result.recalls[k]:.4f}")
    return EXIT_OK


def cmd_sweep_classes(args):
    config = _load_config(args)
    from .experiments import make_run_dir, sweep_classes, write_sweep_csv

    seeds = _parse_int_csv(args.seeds) if args.seeds else [config.seed]
    rows, _ = sweep_classes(
        config, _parse_int_csv(args.class_counts), args.total_samples, seeds
    )
    run_dir = make_run_dir(_output_root(args), "sweep", config.seed)
    path = Path(run_dir) / "sweep.csv"
    write_sweep_csv(rows, config, path)
    print(f"sweep table: {path}")
    for row in rows:
        print(f"k={row['k']:4d} per_class={row['samples_per_class']:4d} "
              f"recall@1={row['recall@1']:.4f}")
    return EXIT_OK


def cmd_compare(args):
    config = _load_config(args)
    from .experiments import compare_methods, make_run_dir, write_compare_csv

    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for method in methods:
        config.with_updates(method=method)  # validates the method name
    seeds = _parse_int_csv(args.seeds) if args.seeds else [config.seed]
    rows, _ = compare_methods(config, methods, seeds)
    run_dir = make_run_dir(_output_root(args), "compare", config.seed)
    path = Path(run_dir) / "compare.csv"
    write_compare_csv(rows, config, path)
    print(f"comparison table: {path}")
    for row in rows:
        first_k = config["eval.recall_k"][0]
        print(f"{row['method']:8s} recall@{first_k} = "
              f"{row[f'recall@{first_k}_mean']:.4f} "
              f"+/- {row[f'recall@{first_k}_std']:.4f}")
    return EXIT_OK


def cmd_analyze(args):
    from .experiments import analyze_checkpoint

    analyses = [a.strip() for a in args.analyses.split(",") if a.strip()]
    out_dir = args.out or Path(args.checkpoint).parent / "analysis"
    try:
        written = analyze_checkpoint(
            args.checkpoint, analyses, out_dir, dataset_path=args.dataset
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_grad_check(args):
    from .gradsuite import run_gradient_suite

    reports = run_gradient_suite(configurations=args.configurations)
    width = max(len(r.name) for r in reports)
    ok = True
    for r in reports:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  configs={r.configurations:3d}  "
              f"max_rel_err={r.worst_error:.3e}  tol={r.tolerance:.0e}  {status}")
        ok &= r.passed
    print("gradient suite:", "pass" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_RUNTIME


def build_parser():
    parser = argparse.ArgumentParser(
        prog="novaug",
        description="Train and analyze metric embeddings with synthetic-class "
                    "augmentation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("config", help="path to a key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--output-root", help="run directory root "
                       "(default $NOVAUG_OUTPUT_ROOT or ./runs)")

    p_train = sub.add_parser("train", help="run one experiment")
    add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep-classes",
                             help="fixed-budget sweep over training class counts")
    add_common(p_sweep)
    p_sweep.add_argument("--class-counts", required=True,
                         help="comma-separated class counts, e.g. 8,16,32,64")
    p_sweep.add_argument("--total-samples", type=int, required=True)
    p_sweep.add_argument("--seeds", help="comma-separated seeds (median reported)")
    p_sweep.set_defaults(func=cmd_sweep_classes)

    p_cmp = sub.add_parser("compare", help="paired multi-seed method comparison")
    add_common(p_cmp)
    p_cmp.add_argument("--methods", required=True,
                       help="comma-separated subset of vanilla,ps,l2a_ec,l2a_nc")
    p_cmp.add_argument("--seeds", help="comma-separated seeds")
    p_cmp.set_defaults(func=cmd_compare)

    p_an = sub.add_parser("analyze", help="read-only analyses of a checkpoint")
    p_an.add_argument("checkpoint", help="path to checkpoint.bin")
    p_an.add_argument("--analyses", default="recall",
                      help="comma-separated: recall, kl, pca")
    p_an.add_argument("--dataset", help="feature file overriding the config's "
                      "evaluation split")
    p_an.add_argument("--out", help="output directory for analysis CSVs")
    p_an.set_defaults(func=cmd_analyze)

    p_gc = sub.add_parser("grad-check",
                          help="finite-difference validation of all "
                               "differentiable operations")
    p_gc.add_argument("--configurations", type=int, default=50)
    p_gc.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError, SpecError) as exc:
        if isinstance(exc, ConfigError):
            print("configuration errors:", file=sys.stderr)
            for field in exc.fields:
                print(f"  - {field}", file=sys.stderr)
        else:
            print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, OptimizerFault) as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
