"""Command-line entry point: ``python -m salt_lpf <command> ...``.

Exit status is 0 on success. Failures print one ``error[<category>]: ...``
line on stderr and exit with the category's code.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .experiment import (
    ConfigError,
    ExperimentConfig,
    config_from_mapping,
    load_config,
    metrics_from_snapshots,
    run_twin_experiment,
    simulate_signal,
)
from .filtering import DegenerateWeightsError, TemperingError
from .metrics import write_metrics
from .swe import SolverBlowup

EXIT_USAGE = 2
EXIT_CODES = {"config": 3, "io": 4, "solver": 5, "filter": 6}


class CLIError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _parse_set(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value
    return out


def build_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    values = _parse_set(args.set)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return config_from_mapping(values, cfg)


def _out_dir(args, default: str) -> Path:
    return Path(args.out or default)


def cmd_simulate(args) -> None:
    cfg = build_config(args)
    out = _out_dir(args, "signal_out")
    states, batches = simulate_signal(cfg, out)
    print(f"wrote {len(states)} signal snapshots and {len(batches)} observation batches to {out}")


def cmd_run(args) -> None:
    cfg = build_config(args)
    out = _out_dir(args, "run_out")
    rec = run_twin_experiment(cfg, out)
    last = rec.metrics[-1]
    print(
        f"{cfg.filter} run: {len(rec.diagnostics)} assimilations, "
        f"final EMRE(eta)={last.emre_eta:.4g} RMSE(eta)={last.rmse_eta:.4g}, "
        f"mean tempering steps {rec.mean_tempering_steps():.2f}; output in {out}"
    )


COMPARE_HEADER = ("filter", "d_obs", "seed", "tail_emre_eta", "tail_rmse_eta", "tail_rb_eta", "mean_tempering_steps")


def cmd_compare(args) -> None:
    cfg = build_config(args)
    out = _out_dir(args, "compare_out")
    out.mkdir(parents=True, exist_ok=True)
    grids = args.grids
    if not grids:
        # 2^n x 2^n observation grids up to the model resolution
        grids, n = [], 2
        while n <= cfg.d:
            grids.append(n)
            n *= 2
    seeds = args.seeds if args.seeds else [cfg.seed]
    rows = []
    for d_obs in grids:
        for filt in args.filters:
            for seed in seeds:
                run_cfg = cfg.replace(filter=filt, d_obs=d_obs, obs_kind="fixed_grid", seed=seed)
                rec = run_twin_experiment(run_cfg, out / f"{filt}_g{d_obs}_s{seed}")
                row = (filt, d_obs, seed, rec.tail_mean("emre_eta", args.tail),
                       rec.tail_mean("rmse_eta", args.tail), rec.tail_mean("rb_eta", args.tail),
                       rec.mean_tempering_steps())
                rows.append(row)
                print(f"{filt:>3} grid {d_obs:>3}x{d_obs:<3} seed {seed}: EMRE(eta) {row[3]:.4g}  "
                      f"tempering {row[6]:.2f}", flush=True)
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARE_HEADER)
        for r in rows:
            w.writerow([r[0], r[1], r[2]] + [repr(float(x)) for x in r[3:]])
    print(f"wrote {out / 'compare.csv'}")


def cmd_metrics(args) -> None:
    cfg = build_config(args)
    src = Path(args.snapshots)
    if not src.is_dir():
        raise FileNotFoundError(f"snapshot directory {src} not found")
    records = metrics_from_snapshots(src, cfg)
    out = Path(args.out) if args.out else src / "metrics_recomputed.csv"
    write_metrics(out, records)
    print(f"wrote {len(records)} metric rows to {out}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int, help="seed for all random streams")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--out", help="output directory (file for 'metrics')")

    parser = argparse.ArgumentParser(prog="salt-lpf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="signal trajectory and observations only")
    sub.add_parser("run", parents=[common], help="one twin experiment")
    p = sub.add_parser("compare", parents=[common], help="PF vs LPF over observation grids")
    p.add_argument("--grids", type=int, nargs="+", help="observation grid sizes (default 2, 4, ..., d)")
    p.add_argument("--filters", nargs="+", default=["pf", "lpf"], choices=["pf", "lpf"])
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--tail", type=int, default=25, help="metric samples in the time average")
    p = sub.add_parser("metrics", parents=[common], help="recompute metrics from snapshots")
    p.add_argument("snapshots", help="directory with signal_*.lpf / ensemble_*.lpf")
    return parser


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "compare": cmd_compare, "metrics": cmd_metrics}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    try:
        try:
            COMMANDS[args.command](args)
        except ConfigError as exc:
            raise CLIError("config", str(exc)) from exc
        except SolverBlowup as exc:
            raise CLIError("solver", str(exc)) from exc
        except (DegenerateWeightsError, TemperingError) as exc:
            raise CLIError("filter", str(exc)) from exc
        except (OSError, ValueError) as exc:
            raise CLIError("io", str(exc)) from exc
    except CLIError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES[exc.category]
    return 0


if __name__ == "__main__":
    sys.exit(main())
