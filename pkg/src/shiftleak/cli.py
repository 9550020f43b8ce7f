"""Command line entry point: ``shiftleak run | report | validate``.

Exit codes: 0 ok, 1 configuration or missing-data error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from typing import Optional, Sequence

from . import __version__
from .errors import ConfigError, DatasetMissingError
from .fl import load_config
from .report import DEFAULT_THRESHOLD, report
from .studies import PRESET_NAMES, StudyPreset, make_preset, preset_overrides, run_study, study_from_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
DATASETS = ("synthetic", "mnist", "fashion_mnist", "census")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shiftleak",
                                description="Federated distribution-shift leakage experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = p.add_subparsers(dest="command", required=True)

    def source(sp):
        sp.add_argument("--config", help="JSON study, experiment config or run manifest")
        sp.add_argument("--preset", choices=PRESET_NAMES, help="named study preset")
        sp.add_argument("--dataset", choices=DATASETS, default="synthetic",
                        help="dataset for presets (default: synthetic)")
        sp.add_argument("--data-dir", help="directory holding MNIST IDX files or adult.csv")
        sp.add_argument("--seed", type=int, help="base seed for model, data and order streams")
        sp.add_argument("--repeats", type=int, help="override the number of repeats")

    run = sub.add_parser("run", help="run a study and write telemetry")
    source(run)
    run.add_argument("--out", required=True, help="telemetry output directory")
    run.add_argument("--parallel", type=int, default=1, metavar="N",
                     help="worker processes for sweep points and repeats")

    rep = sub.add_parser("report", help="aggregate a telemetry directory")
    rep.add_argument("telemetry_dir")
    rep.add_argument("--out", help="report directory (default: <telemetry_dir>/report)")
    rep.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD,
                     help="z-score needed for a detection verdict")

    val = sub.add_parser("validate", help="check a config without running it")
    source(val)
    return p


def resolve_study(args) -> StudyPreset:
    if bool(args.config) == bool(args.preset):
        raise ConfigError("give exactly one of --config or --preset")
    if args.preset:
        study = make_preset(args.preset, args.dataset, args.data_dir, args.seed)
    else:
        study = study_from_config(load_config(args.config))
        if args.seed is not None:
            study = preset_overrides(study, {"seeds": {"model": args.seed, "data": args.seed,
                                                       "order": args.seed}})
    if args.repeats is not None:
        study = replace(study, repeats=args.repeats, only_repeat=None)
    return study


def cmd_validate(args) -> int:
    try:
        study = resolve_study(args)
        problems = study.violations()
    except ConfigError as exc:
        problems = list(exc.violations)
    except OSError as exc:
        problems = [f"config: {exc}"]
    if problems:
        for v in problems:
            print(v)
        return EXIT_CONFIG
    print("ok")
    return EXIT_OK


def cmd_run(args) -> int:
    study = resolve_study(args)
    paths = run_study(study, args.out, max(1, args.parallel))
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_report(args) -> int:
    texts = report(args.telemetry_dir, args.out, args.threshold)
    sys.stdout.write(texts["verdicts.txt"])
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": cmd_run, "report": cmd_report, "validate": cmd_validate}[args.command]
    try:
        return handler(args)
    except (ConfigError, DatasetMissingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if args.command != "report" else EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
