"""Command-line entry point: run bundled or custom scenarios.

    kvsla run <scenario-file-or-name> [--seed N] [--out DIR]
    kvsla list-scenarios
    kvsla verify [--tests DIR]
"""

from __future__ import annotations

import argparse
import logging
import subprocess
import sys
import time
from pathlib import Path

from . import scenario as sc
from .model import ConfigError


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        scen = sc.load(sc.resolve(args.scenario))
        if args.seed is not None:
            scen = sc.with_seed(scen, args.seed)
        out = Path(args.out) if args.out else Path("out") / scen.name
        started = time.perf_counter()
        results = sc.run(scen, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    elapsed = time.perf_counter() - started
    print(f"{scen.name}: wrote {out} in {elapsed:.1f}s")
    summary = results[""].files.get("summary.csv", [])
    for line in summary:
        print("  " + line)
    return 0


def _cmd_list(args: argparse.Namespace) -> int:
    for path in sc.bundled():
        try:
            scen = sc.load(path)
        except ConfigError as exc:
            print(f"{path.stem:36s} INVALID: {exc}")
            continue
        print(f"{path.stem:36s} {scen.mode:10s} {scen.description}")
    return 0


def _find_tests(explicit: str | None) -> Path | None:
    candidates = [Path(explicit)] if explicit else [Path.cwd() / "tests", Path(__file__).resolve().parents[2] / "tests"]
    for c in candidates:
        if (c / "test_acceptance.py").exists():
            return c / "test_acceptance.py"
    return None


def _cmd_verify(args: argparse.Namespace) -> int:
    target = _find_tests(args.tests)
    if target is None:
        print("error: tests/test_acceptance.py not found; run from a source checkout or pass --tests",
              file=sys.stderr)
        return 2
    return subprocess.call([sys.executable, "-m", "pytest", "-s", "-q", str(target)])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvsla", description="Probabilistic consistency/latency SLA experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log controller iterations")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a scenario and write CSV outputs")
    p_run.add_argument("scenario", help="scenario JSON file, or the name of a bundled scenario")
    p_run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p_run.add_argument("--out", default=None, help="output directory (default: out/<name>)")
    p_run.set_defaults(func=_cmd_run)
    p_list = sub.add_parser("list-scenarios", help="list bundled scenarios")
    p_list.set_defaults(func=_cmd_list)
    p_verify = sub.add_parser("verify", help="run the acceptance suite")
    p_verify.add_argument("--tests", default=None, help="directory holding test_acceptance.py")
    p_verify.set_defaults(func=_cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
