"""Command-line entry point: ``mincam <verb> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence.
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, json_schema, load_config
from .errors import ConfigError, DataError, DivergenceError, FormatError
from .experiments import Runner, plot_data
from .scenes import Dataset
from .sensor import export_masks
from .trainer import evaluate, load_checkpoint, summarize_checkpoint

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4


def _config(args, kind=None):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if kind is not None:
        changes["kind"] = kind
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _runner(args, kind=None):
    return Runner(_config(args, kind), out=args.out, threads=args.threads, deterministic=args.deterministic)


def _print_rows(rows):
    print("kind,k_or_res,pixel_count,test_rmse,test_acc,train_time")
    for r in rows:
        print(f"{r.kind},{r.k_or_res},{r.pixel_count},{r.test_rmse:.4f},{r.test_acc:.4f},{r.train_time:.1f}")


def cmd_validate(args):
    cfg = _config(args)
    print(f"ok: kind={cfg.kind} digest={cfg.digest()}")


def cmd_schema(args):
    print(json.dumps(json_schema(), indent=2))


def cmd_gen_data(args):
    paths = _runner(args).ensure_data()
    for split, p in paths.items():
        print(f"{split}: {p} ({len(Dataset(p))} scenes)")


def cmd_train(args):
    runner = _runner(args)
    if (args.k is None) == (args.resolution is None):
        raise ConfigError("train needs exactly one of --k or --resolution")
    row = runner.train_one("mincam", args.k) if args.k is not None else runner.train_one("baseline", args.resolution)
    _print_rows([row])
    print(f"checkpoint: {row.checkpoint}")


def cmd_sweep(args):
    runner = _runner(args)
    kinds = ["mincam", "baseline"] if args.kind == "both" else [args.kind]
    rows = []
    for kind in kinds:
        rows += runner.run_mincam_sweep() if kind == "mincam" else runner.run_baseline_sweep()
    _print_rows(rows)


def cmd_ablation(args):
    rows, summary = _runner(args, "ablation_no_sensor").run_ablation_no_sensor()
    _print_rows(rows)
    print(f"rmse ratio (no-sensor / sensor): {summary['ratio']:.3f}")


def cmd_prune(args):
    cfg = _config(args, "prune")
    changes = {}
    if args.checkpoint:
        changes["checkpoint"] = args.checkpoint
    if args.target_k is not None:
        changes["target_k"] = args.target_k
    if changes:
        cfg = dataclasses.replace(cfg, prune=dataclasses.replace(cfg.prune, **changes))
    runner = Runner(cfg, out=args.out, threads=args.threads, deterministic=args.deterministic)
    trace, rows = runner.run_prune()
    _print_rows(rows)
    for i, (j, pre, post) in enumerate(zip(trace.removed, trace.pre_loss, trace.post_loss), start=1):
        print(f"step {i}: removed pixel {j}  loss {pre:.4f} -> {post:.4f}")


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    runner = _runner(args)
    data = Dataset(args.data) if args.data else runner.dataset("test")
    # the default matches the noise used for the results CSV
    seed = args.noise_seed if args.noise_seed is not None else runner.test_noise_seed()
    m = evaluate(ckpt, data, seed)
    print(json.dumps({"rmse": m["rmse"], "accuracy": m["accuracy"], "loss": m["loss"],
                      "confusion": m["confusion"]}))


def cmd_export_masks(args):
    ckpt = load_checkpoint(args.checkpoint)
    out = Path(args.dest) if args.dest else Path(args.checkpoint).parent / "masks"
    paths = export_masks(ckpt.bank(), out, experiment_id=Path(args.checkpoint).parent.name, seed=ckpt.train.seed)
    print(f"wrote {len(paths)} masks to {out}")


def cmd_plot_data(args):
    table, report = plot_data(args.csv, args.dest)
    if args.dest is None:
        print("series,log2_pixels,pixel_count,test_rmse")
        for t in table:
            print(f"{t[0]},{t[1]:.6g},{t[2]},{t[3]!r}")
    if report is not None:
        print(f"# crossover: {json.dumps(report)}")


def cmd_summary(args):
    print(summarize_checkpoint(args.checkpoint))


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--out", help="output root (default: $MINCAM_OUT or ./mincam-out)")
    common.add_argument("--threads", type=int, default=1, help="parallel independent runs")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                        help="single-worker, bit-reproducible mode (default on)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mincam", description="Freeform-pixel camera simulator and trainer.")
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn)
        return sp

    verb("validate", cmd_validate, "check a config against the schema")
    verb("schema", cmd_schema, "print the config JSON schema")
    verb("gen-data", cmd_gen_data, "generate the train/val/test scene files")
    sp = verb("train", cmd_train, "train one camera")
    sp.add_argument("--k", type=int, help="freeform pixel count")
    sp.add_argument("--resolution", type=int, help="baseline camera resolution R (R x R pixels)")
    sp = verb("sweep", cmd_sweep, "train and evaluate a pixel-count sweep")
    sp.add_argument("--kind", choices=["mincam", "baseline", "both"], default="both")
    verb("ablation", cmd_ablation, "sensor-model ablation")
    sp = verb("prune", cmd_prune, "greedy pixel pruning")
    sp.add_argument("--checkpoint")
    sp.add_argument("--target-k", type=int)
    sp = verb("eval", cmd_eval, "evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="dataset file (default: configured test split)")
    sp.add_argument("--noise-seed", type=int)
    sp = verb("export-masks", cmd_export_masks, "write PGM masks of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dest")
    sp = verb("plot-data", cmd_plot_data, "plot-ready table from results CSVs")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("--dest")
    sp = verb("summary", cmd_summary, "print a checkpoint summary")
    sp.add_argument("--checkpoint", required=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


if __name__ == "__main__":
    sys.exit(main())
