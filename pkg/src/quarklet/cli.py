"""``quarklet bench <scenario> --config FILE [--seed N] [--backend B] --out PATH``."""
from __future__ import annotations

import argparse
import dataclasses
import sys

from .bench import SCENARIOS, STARTUP_MODES, BenchConfig, run
from .errors import InvalidConfig, ScenarioFailure


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quarklet")
    sub = parser.add_subparsers(dest="command", required=True)
    bench = sub.add_parser("bench", help="run one benchmark scenario and write a report")
    bench.add_argument("scenario", choices=SCENARIOS)
    bench.add_argument("--config", required=True, help="flat key=value or JSON config file")
    bench.add_argument("--seed", type=int, help="override the config seed")
    bench.add_argument("--backend", choices=("inproc", "loopback"), help="override the transport backend")
    bench.add_argument("--mode", choices=("all",) + STARTUP_MODES, help="startup mode filter")
    bench.add_argument("--format", choices=("csv", "markdown"),
                       help="report format (default: from the --out suffix, .md means markdown)")
    bench.add_argument("--out", required=True, help="report path")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = BenchConfig.load(args.config)
        overrides = {k: v for k, v in (("seed", args.seed), ("backend", args.backend), ("mode", args.mode))
                     if v is not None}
        config = dataclasses.replace(config, **overrides)
        result = run(args.scenario, config)
        result.write(args.out, args.format)
    except InvalidConfig as exc:
        print(f"quarklet: invalid config: {exc}", file=sys.stderr)
        return 2
    except ScenarioFailure as exc:
        print(f"quarklet: scenario failed: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"quarklet: cannot write report: {exc}", file=sys.stderr)
        return 1
    print(f"{args.scenario}: {len(result.rows)} row(s) -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
