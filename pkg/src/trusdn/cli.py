"""``trusdn`` command line: run scenarios, benchmark flow setup, summarize CSVs.

Exit status is 0 on success, 1 when a scenario assertion fails and 2 on usage
or parse errors.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .adversary import Scenario, bundled_scenarios, run_scenario
from .bench import BenchConfig, format_summary, run_bench, summary_table
from .endpoint import Mode
from .errors import ParseError, TopologyError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

_MODES = {"psk": Mode.PSK, "pk": Mode.BASELINE}


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 already; keep the message on stderr and the code stable
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_seed():
    raw = os.environ.get("TRUSDN_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ParseError(f"TRUSDN_SEED is not an integer: {raw!r}") from None


def resolve_scenario(ref: str) -> Path:
    """A path on disk, or the name of a bundled scenario."""
    path = Path(ref)
    if path.exists():
        return path
    bundled = bundled_scenarios()
    name = path.stem if path.suffix == ".json" else ref
    if name in bundled and path.parent == Path("."):
        return bundled[name]
    raise ParseError(f"no such scenario file or bundled scenario: {ref}")


def cmd_run(args) -> int:
    scenario = Scenario.load(resolve_scenario(args.scenario))
    seed = args.seed if args.seed is not None else _default_seed()
    report = run_scenario(scenario, seed)
    print(report.render())
    if args.metrics:
        for k, v in report.metrics.items():
            print(f"  {k}={v}")
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_bench(args) -> int:
    seed = args.seed if args.seed is not None else (_default_seed() or 0)
    cfg = BenchConfig(args.flows, args.repeats, _MODES[args.mode], seed, args.csv)
    records = run_bench(cfg, workers=args.workers)
    print(f"wrote {len(records)} rows to {args.csv}")
    return EXIT_OK


def cmd_summary(args) -> int:
    print(format_summary(summary_table(args.csv)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trusdn", description="Attested SDN trust-bootstrapping simulator")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run an adversary scenario")
    run.add_argument("scenario", help="scenario JSON file or bundled scenario name")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--metrics", action="store_true", help="also print the metrics snapshot")
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench", help="benchmark first-packet flow setup")
    bench.add_argument("--flows", type=int, required=True)
    bench.add_argument("--repeats", type=int, default=1)
    bench.add_argument("--mode", choices=sorted(_MODES), default="psk")
    bench.add_argument("--csv", required=True)
    bench.add_argument("--seed", type=int, default=None)
    bench.add_argument("--workers", type=int, default=1)
    bench.set_defaults(func=cmd_bench)

    summ = sub.add_parser("summary", help="min/max/mean/median/stddev of a bench CSV")
    summ.add_argument("csv")
    summ.set_defaults(func=cmd_summary)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"trusdn: parse error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TopologyError as exc:
        print(f"trusdn: bad topology: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"trusdn: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"trusdn: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
