"""Command-line entry point: ``waicwbic <mode> --config cfg.json``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .harness import MODES, ConfigError, ExperimentConfig, run_experiment, write_outputs


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="waicwbic", description=__doc__)
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("--config", required=True, help="JSON experiment configuration")
    parser.add_argument("--out", help="output directory (overrides output_dir)")
    parser.add_argument("--threads", type=int, help="worker processes for replications")
    parser.add_argument("--seed", type=int, help="master seed (overrides master_seed)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
        raw["mode"] = args.mode
        if args.seed is not None:
            raw["master_seed"] = args.seed
        if args.out is not None:
            raw["output_dir"] = args.out
        if args.threads is not None:
            raw["threads"] = args.threads
        cfg = ExperimentConfig.from_dict(raw)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    report = run_experiment(cfg)
    paths = write_outputs(report, cfg.output_dir)
    for check in report.checks:
        print(f"{'PASS' if check['passed'] else 'FAIL'}  {check['name']}")
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
