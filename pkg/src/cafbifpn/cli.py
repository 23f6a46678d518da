"""
Command-line surface.

    cafbifpn selfcheck [--inject-fault topk-tiebreak]
    cafbifpn forward --config <path> --input <dir> --output <dir>
    cafbifpn gradcheck --config <path> --seed <u64>
    cafbifpn bench --config <path>
    cafbifpn gen-fixture --seed <u64> --out <dir>

Reports go to standard output as JSON, diagnostics to standard error. Exit codes: 0 success,
1 check failure, 2 usage or configuration error.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

from pydantic import BaseModel

from cafbifpn.commands import cmd_bench, cmd_forward, cmd_gen_fixture, cmd_gradcheck, cmd_selfcheck
from cafbifpn.commands.selfcheck import FAULTS
from cafbifpn.errors import CAFBiFPNError, ConfigError
from cafbifpn.io import RunConfig, config_parse
from cafbifpn.io.config import MAX_SEED

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2


def _emit(report: BaseModel) -> None:
    sys.stdout.write(report.model_dump_json(indent=2) + "\n")


def _load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as e:
        raise ConfigError(f"{path}: config is not UTF-8 ({e.reason} at byte {e.start})") from e
    return config_parse(text)


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value <= MAX_SEED:
        raise argparse.ArgumentTypeError(f"seed must lie in [0, 2^64), got {text}")
    return value


def run_selfcheck(args: argparse.Namespace) -> int:
    results = cmd_selfcheck(inject_fault=args.inject_fault)
    for result in results:
        line = f"PASS  {result.name}" if result.passed else f"FAIL  {result.name}: {result.detail}"
        print(line)
    failed = sum(not r.passed for r in results)
    logging.info(f"{len(results) - failed}/{len(results)} properties hold")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def run_forward(args: argparse.Namespace) -> int:
    report = cmd_forward(_load_config(args.config), args.input, args.output)
    _emit(report)
    return EXIT_OK


def run_gradcheck(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    report = cmd_gradcheck(config, args.seed if args.seed is not None else config.seed, args.group)
    _emit(report)
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def run_bench(args: argparse.Namespace) -> int:
    report = cmd_bench(_load_config(args.config), repeats=args.repeats)
    _emit(report)
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def run_gen_fixture(args: argparse.Namespace) -> int:
    _emit(cmd_gen_fixture(args.seed, args.out))
    return EXIT_OK


COMMANDS: dict[str, Callable[[argparse.Namespace], int]] = {
    "selfcheck": run_selfcheck,
    "forward": run_forward,
    "gradcheck": run_gradcheck,
    "bench": run_bench,
    "gen-fixture": run_gen_fixture,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cafbifpn", description="Verifiable C-AFBiFPN numeric kernels")
    parser.add_argument("--verbose", action="store_true", help="log debug diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)

    selfcheck = sub.add_parser("selfcheck", help="run the desk-scale property suite")
    selfcheck.add_argument("--inject-fault", choices=FAULTS, default=None)

    forward = sub.add_parser("forward", help="run the full pipeline on a fixture directory")
    forward.add_argument("--config", default=None)
    forward.add_argument("--input", required=True)
    forward.add_argument("--output", required=True)

    gradcheck = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    gradcheck.add_argument("--config", default=None)
    gradcheck.add_argument("--seed", type=_seed, default=None)
    gradcheck.add_argument("--group", action="append", default=None, help="restrict to a parameter group")

    bench = sub.add_parser("bench", help="dense versus routed attention cost")
    bench.add_argument("--config", default=None)
    bench.add_argument("--repeats", type=int, default=3)

    fixture = sub.add_parser("gen-fixture", help="write synthetic backbone maps C2..C5")
    fixture.add_argument("--seed", type=_seed, required=True)
    fixture.add_argument("--out", required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except (CAFBiFPNError, OSError) as e:
        logging.error(f"{args.command}: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
