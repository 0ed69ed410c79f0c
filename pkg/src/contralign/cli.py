"""Command-line entry point.

Subcommands: train, ablate, gradcheck, datagen, plotdata. Exit codes:
0 success, 1 config error, 2 run failure, 3 gradcheck failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import CONFIG_SCHEMA, apply_overrides, default_config, parse_config_file
from .data import export_split_csv
from .errors import ConfigError, ContractError
from .harness import (
    AXIS_KEYS,
    ExperimentConfig,
    emit_plot_data,
    gradcheck_command,
    run_ablation_grid,
    run_experiment,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contralign",
        description="Semi-supervised domain adaptation training engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, seeds=True):
        p.add_argument("--out", help="output directory (overrides config `out`)")
        p.add_argument("--workers", type=int, default=1, help="parallel seed workers")
        p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
        p.add_argument("--variant", help="training variant override")
        if seeds:
            group = p.add_mutually_exclusive_group()
            group.add_argument("--seed", type=int, help="run a single seed")
            group.add_argument("--seeds", type=int, help="run seeds 0..n-1")

    p_train = sub.add_parser("train", help="run one experiment over its seeds")
    p_train.add_argument("config", help="path to a flat key=value config file")
    add_common(p_train)

    p_ablate = sub.add_parser("ablate", help="Cartesian sweep over config axes")
    p_ablate.add_argument("config", help="path to a flat key=value config file")
    p_ablate.add_argument(
        "--axis",
        action="append",
        required=True,
        metavar="name=v1,v2,...",
        help=f"sweep axis; valid names: {', '.join(sorted(AXIS_KEYS))}",
    )
    add_common(p_ablate)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p_grad.add_argument("--seed", type=int, default=0)

    p_data = sub.add_parser("datagen", help="write a dataset split to CSV")
    p_data.add_argument("config", nargs="?", help="config file (defaults when omitted)")
    p_data.add_argument("--out", required=True, help="destination CSV path")
    p_data.add_argument("--seed", type=int, help="run seed to derive the split from")
    p_data.add_argument("--no-figures", action="store_true")

    p_plot = sub.add_parser("plotdata", help="flatten reports into tidy CSV")
    p_plot.add_argument("reports", nargs="+", help="report.json / grid.json paths or run dirs")
    p_plot.add_argument("--out", default="plot_data.csv", help="destination CSV path")
    return parser


def _load_config(args) -> ExperimentConfig:
    mapping = parse_config_file(args.config) if args.config else default_config()
    overrides = {}
    if getattr(args, "variant", None):
        overrides["train.variant"] = args.variant
    if getattr(args, "out", None):
        overrides["out"] = args.out
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = (args.seed,)
    elif getattr(args, "seeds", None) is not None:
        if args.seeds < 1:
            raise ConfigError("--seeds must be >= 1")
        overrides["seeds"] = tuple(range(args.seeds))
    if overrides:
        mapping = apply_overrides(mapping, overrides)
    return ExperimentConfig(mapping)


def _parse_axes(specs) -> dict:
    axes = {}
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"--axis expects name=v1,v2,..., got {spec!r}")
        name, _, raw = spec.partition("=")
        name = name.strip()
        if name not in AXIS_KEYS:
            raise ConfigError(
                f"unknown ablation axis {name!r}; valid axes: {sorted(AXIS_KEYS)}"
            )
        if name in axes:
            raise ConfigError(f"duplicate --axis {name!r}")
        caster, _ = CONFIG_SCHEMA[AXIS_KEYS[name]]
        values = [v.strip() for v in raw.split(",") if v.strip()]
        if not values:
            raise ConfigError(f"axis {name!r} has no values")
        try:
            axes[name] = [caster(v) for v in values]
        except (ValueError, TypeError) as err:
            raise ConfigError(f"bad value for axis {name!r}: {err}") from err
    return axes


def _cmd_train(args) -> int:
    config = _load_config(args)
    report = run_experiment(
        config, workers=args.workers, figures=not args.no_figures
    )
    for entry in report.per_seed:
        if entry["status"] == "ok":
            print(
                f"seed {entry['seed']}: best val {entry['best_val_accuracy']:.4f} "
                f"test {entry['best_test_accuracy']:.4f} "
                f"(final test {entry['final_test_accuracy']:.4f})"
            )
        else:
            print(f"seed {entry['seed']}: {entry['status']} ({entry['error']})")
    agg = report.aggregate
    if agg["seeds_ok"] == 0:
        print("all seeds failed", file=sys.stderr)
        return 2
    mean = agg["best_test_accuracy"]["mean"]
    std = agg["best_test_accuracy"]["std"]
    print(f"test accuracy {mean:.4f} ± {std:.4f} over {agg['seeds_ok']} seeds")
    print(f"report: {Path(config.out_dir) / 'report.json'}")
    return 0


def _cmd_ablate(args) -> int:
    config = _load_config(args)
    axes = _parse_axes(args.axis)
    cells = run_ablation_grid(
        config, axes, workers=args.workers, figures=not args.no_figures
    )
    any_ok = False
    for cell in cells:
        agg = cell.report.aggregate
        label = ", ".join(f"{k}={v}" for k, v in cell.values.items())
        if agg["seeds_ok"]:
            any_ok = True
            mean = agg["best_test_accuracy"]["mean"]
            std = agg["best_test_accuracy"]["std"]
            print(f"{label}: test {mean:.4f} ± {std:.4f}")
        else:
            print(f"{label}: all seeds failed")
    if not any_ok:
        print("every grid cell failed", file=sys.stderr)
        return 2
    print(f"grid: {Path(config.out_dir) / 'ablation.csv'}")
    return 0


def _cmd_gradcheck(args) -> int:
    report = gradcheck_command(seed=args.seed)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 3


def _cmd_datagen(args) -> int:
    mapping = parse_config_file(args.config) if args.config else default_config()
    config = ExperimentConfig(mapping)
    seed = args.seed if args.seed is not None else config.seeds[0]
    split = config.split_for_seed(seed)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    export_split_csv(split, out)
    print(f"wrote {out}")
    if not args.no_figures:
        from . import plots

        for path in plots.render_dataset_figure(split, out.with_suffix(".png")):
            print(f"wrote {path}")
    return 0


def _cmd_plotdata(args) -> int:
    count = emit_plot_data(args.reports, args.out)
    print(f"wrote {count} rows to {args.out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "train": _cmd_train,
        "ablate": _cmd_ablate,
        "gradcheck": _cmd_gradcheck,
        "datagen": _cmd_datagen,
        "plotdata": _cmd_plotdata,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, ContractError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"run failure: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
