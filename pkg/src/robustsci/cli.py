"""Command-line entry point: ``robustsci {train,attack,landscape,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .errors import ConfigError, DataError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustsci",
                                     description="Adversarial robustness experiments for scientific surrogates.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train (or load) the configured models and report their clean accuracy",
        "attack": "run the configured epsilon/mode sweep and write plot data",
        "landscape": "scan the loss as a function of the model input",
        "report": "regenerate CSV and plot data from an existing report.json",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, required=name != "report", help="TOML experiment config")
        p.add_argument("--seed", type=int, default=None, help="run only this seed (overrides the config)")
        p.add_argument("--out", type=Path, default=None, help="output directory (overrides the config)")
        p.add_argument("--workers", type=int, default=None, help="parallel (model, seed) units")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            if args.out is None and args.config is None:
                print("report needs --out or --config", file=sys.stderr)
                return 2
            out = args.out
            if out is None:
                out = Path(harness.ExperimentConfig.from_file(args.config).out)
            report = harness.regenerate(out)
        else:
            cfg = harness.ExperimentConfig.from_file(args.config)
            cfg = cfg.with_overrides(args.seed, args.out and str(args.out), args.workers)
            report = harness.run(cfg, args.command)
            out = Path(cfg.out)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    failures = report.metadata.get("failures", [])
    print(f"wrote {len(report.rows)} rows to {out / 'report.csv'}"
          + (f" ({len(failures)} failed cells)" if failures else ""))
    return 0


if __name__ == "__main__":
    sys.exit(main())
