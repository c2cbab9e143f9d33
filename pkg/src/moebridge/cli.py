"""Command-line surface: profile, partition, train, compare, probe, check, plot.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import load_config
from .data import Task, get_world
from .grouping import ActivationProfile, PartitionPlan, UsageError, partition_experts, \
    profile_activations
from .metrics import export_csv
from .model import Model
from .svgplot import SeriesError, plot_metrics_files
from .train import eval_discrete, run_compare, run_training
from .verify import run_checks


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moebridge",
                                     description="desk-scale grouped-MoE training harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="write expert activation counts for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("config", nargs="?", default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")
    p.add_argument("--batches", type=int, default=2, help="probe batches per modality task")
    p.add_argument("--out", default="profile.jsonl")

    p = sub.add_parser("partition", help="derive an expert partition from a profile")
    p.add_argument("profile")
    p.add_argument("--n-und", type=int, required=True)
    p.add_argument("--strategy", choices=("bimodal", "tripartite"), default="bimodal")
    p.add_argument("--normalize", action="store_true",
                   help="rank by per-modality rates instead of raw counts")
    p.add_argument("--global", dest="global_plan", action="store_true",
                   help="one partition for all layers instead of per layer")
    p.add_argument("--out", default="partition.jsonl")

    p = sub.add_parser("train", help="train one arm from a config file")
    p.add_argument("config", nargs="?", default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")

    p = sub.add_parser("compare", help="run standard/isolated/bridged/und_only arms")
    p.add_argument("config", nargs="?", default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")

    p = sub.add_parser("probe", help="evaluate a checkpoint with routed experts masked")
    p.add_argument("checkpoint")
    p.add_argument("config", nargs="?", default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")

    sub.add_parser("check", help="run the invariant suite")

    p = sub.add_parser("plot", help="render a metric series from one or more runs")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--series", required=True)
    p.add_argument("--x", default="step")
    p.add_argument("--title", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("export-csv", help="flatten a metrics file to CSV")
    p.add_argument("metrics")
    p.add_argument("--out", required=True)
    return parser


def _cmd_profile(args) -> int:
    cfg = load_config(args.config, args.overrides)
    model = Model.load(args.checkpoint)
    world = get_world(cfg.mixture(), cfg.seed)
    batches = [world.probe_batch(task, i)
               for task in (Task.LM, Task.MMU) for i in range(args.batches)]
    profile = profile_activations(model, batches)
    profile.save(args.out)
    print(f"wrote {args.out} ({len(profile.layers())} layers)")
    return 0


def _cmd_partition(args) -> int:
    profile = ActivationProfile.load(args.profile)
    plan = partition_experts(profile, args.n_und, strategy=args.strategy,
                             per_layer=not args.global_plan, normalize=args.normalize)
    plan.save(args.out)
    print(f"wrote {args.out} ({args.strategy}, n_und={args.n_und})")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides)
    result = run_training(cfg)
    print(f"run {result.name} finished: final und eval {result.final_eval_und:.6f} "
          f"(init {result.init_eval_und:.6f}); artifacts in {result.out_dir}")
    return 0


def _cmd_compare(args) -> int:
    cfg = load_config(args.config, args.overrides)
    results = run_compare(cfg)
    summary = Path(cfg.out_dir) / "summary.txt"
    print(summary.read_text(encoding="utf-8"), end="")
    print(f"summary written to {summary}")
    return 0


def _cmd_probe(args) -> int:
    cfg = load_config(args.config, args.overrides)
    model = Model.load(args.checkpoint)
    world = get_world(cfg.mixture(), cfg.seed)
    sheets = world.eval_batches(cfg.eval_batch_pairs, cfg.eval_seqs)
    full = eval_discrete(model, sheets)
    masked = eval_discrete(model, sheets, routed_masked=True)
    print(f"eval und loss: full {full:.6f}, shared-only {masked:.6f}")
    return 0


def _cmd_plot(args) -> int:
    plot_metrics_files(args.metrics, args.series, args.out, x_key=args.x,
                       title=args.title)
    print(f"wrote {args.out}")
    return 0


def _cmd_export_csv(args) -> int:
    export_csv(args.metrics, args.out)
    print(f"wrote {args.out}")
    return 0


_HANDLERS = {
    "profile": _cmd_profile,
    "partition": _cmd_partition,
    "train": _cmd_train,
    "compare": _cmd_compare,
    "probe": _cmd_probe,
    "plot": _cmd_plot,
    "export-csv": _cmd_export_csv,
}


def cli_dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        if args.command == "check":
            return run_checks()
        return _HANDLERS[args.command](args)
    except (UsageError, SeriesError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
