"""Command-line entry point: ``apgppo {train,compare,sweep,gradcheck}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys

import numpy as np

from . import __version__
from .bptt import NumericalFailure
from .config import ConfigError, MODES, TrainConfig, load_config, serialize_config
from .nets import save_checkpoint
from .trainer import METRIC_COLUMNS, train

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_BAD_CONFIG = 2
EXIT_NUMERICAL = 3

NOT_REACHED = "not reached"
SUMMARY_COLUMNS = ("mode", "n_seeds", "threshold", "median_steps_to_threshold",
                   "final_return_mean", "final_return_std")

log = logging.getLogger("apgppo")


def format_number(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if np.isnan(x):
        return "nan"
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return np.format_float_positional(x, unique=True, trim="-")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, str) else format_number(v) for v in row])


def write_metrics(path, metrics) -> None:
    write_csv(path, METRIC_COLUMNS, [m.as_row() for m in metrics])


def _git_stamp() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=os.path.dirname(__file__), timeout=5)
        rev = out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__


def write_manifest(out_dir, cfg: TrainConfig, seeds, mode, command) -> None:
    manifest = {
        "command": command,
        "mode": mode,
        "seeds": list(seeds),
        "output_dir": os.path.abspath(out_dir),
        "version": _git_stamp(),
        "config": serialize_config(cfg),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# summaries


def steps_to_threshold(metrics, threshold) -> float:
    for m in metrics:
        if m.eval_return_mean >= threshold:
            return float(m.env_steps)
    return float("inf")


def default_threshold(final_returns) -> float:
    """90% of the reference return, read as 'within 10% of its magnitude'."""
    ref = float(np.median(final_returns))
    return ref - 0.1 * abs(ref)


def summarize(runs: dict, threshold=None):
    """``runs`` maps mode to a list of per-seed metric lists; returns summary rows."""
    if threshold is None:
        reference = runs.get("ppo_baseline") or next(iter(runs.values()))
        threshold = default_threshold([ms[-1].eval_return_mean for ms in reference])
    rows = []
    for mode, per_seed in runs.items():
        steps = [steps_to_threshold(ms, threshold) for ms in per_seed]
        med = float(np.median(steps))
        finals = np.array([ms[-1].eval_return_mean for ms in per_seed])
        rows.append((mode, len(per_seed), threshold, NOT_REACHED if np.isinf(med) else med,
                     float(finals.mean()), float(finals.std())))
    return rows


# ---------------------------------------------------------------------------
# commands


def _load(args) -> TrainConfig:
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "mode", None):
        overrides.append(f"mode={args.mode}")
    return load_config(args.config, overrides)


def _save_run(out_dir, prefix, result):
    write_metrics(os.path.join(out_dir, f"{prefix}metrics.csv"), result.metrics)
    save_checkpoint(os.path.join(out_dir, f"{prefix}checkpoint.bin"),
                    {"policy": result.policy, "critic": result.critic})


def cmd_train(args) -> int:
    cfg = _load(args)
    os.makedirs(args.out, exist_ok=True)
    write_manifest(args.out, cfg, [cfg.seed], cfg.mode, "train")
    result = train(cfg)
    _save_run(args.out, "", result)
    print(f"wrote {len(result.metrics)} iterations to {os.path.join(args.out, 'metrics.csv')}")
    return EXIT_OK


def _parse_list(text, kind=int):
    try:
        values = [kind(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad list {text!r}") from None
    if not values:
        raise ConfigError("list must not be empty")
    return values


def run_compare(cfg: TrainConfig, seeds, out_dir, threshold=None):
    os.makedirs(out_dir, exist_ok=True)
    write_manifest(out_dir, cfg, seeds, "compare", "compare")
    runs = {}
    for mode in MODES:
        runs[mode] = []
        for seed in seeds:
            result = train(cfg.replace(mode=mode, seed=seed))
            _save_run(out_dir, f"{mode}_seed{seed}_", result)
            runs[mode].append(result.metrics)
    rows = summarize(runs, threshold)
    write_csv(os.path.join(out_dir, "summary.csv"), SUMMARY_COLUMNS, rows)
    return rows


def _print_summary(rows):
    print(" | ".join(SUMMARY_COLUMNS))
    for row in rows:
        print(" | ".join(v if isinstance(v, str) else format_number(v) for v in row))


def cmd_compare(args) -> int:
    cfg = _load(args)
    rows = run_compare(cfg, _parse_list(args.seeds), args.out, args.threshold)
    _print_summary(rows)
    return EXIT_OK


SWEEP_AXES = {"h": "horizon", "f": "frequency"}


def cmd_sweep(args) -> int:
    cfg = _load(args)
    values = _parse_list(args.values)
    seeds = _parse_list(args.seeds)
    field = SWEEP_AXES[args.axis]
    os.makedirs(args.out, exist_ok=True)
    write_manifest(args.out, cfg, seeds, f"sweep:{args.axis}", "sweep")
    all_rows = []
    for value in values:
        sub = cfg.replace(agents=64, **{field: value})
        rows = run_compare(sub, seeds, os.path.join(args.out, f"{args.axis}_{value}"), args.threshold)
        all_rows += [(args.axis, value, *row) for row in rows]
        print(f"{args.axis} = {value}")
        _print_summary(rows)
    write_csv(os.path.join(args.out, "sweep_summary.csv"), ("axis", "value", *SUMMARY_COLUMNS), all_rows)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import run_all

    ok = True
    for name, err, tol in run_all(args.samples, args.seed if args.seed is not None else 0):
        passed = err < tol
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name:<24} max rel error {err:.3e} (tol {tol:.0e})")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apgppo", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_mode=True):
        p.add_argument("--config", required=True, help="INI-style config file")
        p.add_argument("--seed", type=int, default=None)
        if with_mode:
            p.add_argument("--mode", choices=MODES, default=None)
        p.add_argument("--out", default="runs", help="output directory")
        p.add_argument("--override", action="append", metavar="KEY=VALUE", help="repeatable config override")

    p = sub.add_parser("train", help="single training run")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="augmented vs ppo_baseline vs apg_only over seeds")
    common(p, with_mode=False)
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="sensitivity sweep over the APG horizon or frequency")
    common(p, with_mode=False)
    p.add_argument("--axis", choices=sorted(SWEEP_AXES), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="run every finite-difference check")
    p.add_argument("--samples", type=int, default=1000, help="random (s, a) pairs per environment")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
