"""Command line: ``tled solve|warp|metrics|verify``.

Exit codes: 0 success, 1 verification failure, 2 solve did not converge,
3 invalid input, 4 numerical instability.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import ElementInversionError, InstabilityError, TledError

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_NOT_CONVERGED = 2
EXIT_INVALID_INPUT = 3
EXIT_INSTABILITY = 4

log = logging.getLogger("tled")


def default_threads() -> int:
    env = os.environ.get("TLED_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise TledError(f"TLED_THREADS must be a positive integer, got {env!r}") from None
        if n < 1:
            raise TledError(f"TLED_THREADS must be a positive integer, got {env!r}")
        return n
    return os.cpu_count() or 1


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (InstabilityError, ElementInversionError)):
        return EXIT_INSTABILITY
    return EXIT_INVALID_INPUT


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_solve(args) -> int:
    from .config import load_config
    from .pipeline import run_solve

    res = run_solve(load_config(args.config), threads=args.threads)
    _emit({"converged": res.converged, "iterations": res.report.get("iterations"),
           "max_displacement_m": res.report["max_displacement_m"], "outputs": res.outputs})
    if not res.converged:
        print("error: solution did not converge; partial outputs written", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_warp(args) -> int:
    from .config import load_config
    from .pipeline import run_warp

    res = run_warp(load_config(args.config), threads=args.threads)
    _emit({"volume": res.volume_path, "transform": res.transform_path,
           "fit_residual_mm": list(res.fit_residual_mm)})
    return EXIT_OK


def cmd_metrics(args) -> int:
    from .metrics import compare_point_sets, load_points_csv, write_report

    rep = compare_point_sets(load_points_csv(args.a), load_points_csv(args.b), args.percentile, args.threshold)
    if args.output:
        write_report(args.output, rep)
    _emit(rep.to_dict())
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_verify

    res = run_verify(args.suite, threads=args.threads)
    text = res.report_json()
    if args.report:
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    if args.timings:
        Path(args.timings).write_text(json.dumps(res.timings, indent=2) + "\n", encoding="utf-8")
    print(text)
    for name, suite in res.report["suites"].items():
        status = "PASS" if suite["passed"] else "FAIL"
        print(f"{status} {name} ({res.timings[name]:.2f} s)", file=sys.stderr)
    return EXIT_OK if res.passed else EXIT_VERIFY_FAILED


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $TLED_THREADS or all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tled", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", parents=[common], help="solve a mechanics problem from a JSON config")
    s.add_argument("config")
    s.set_defaults(func=cmd_solve)

    w = sub.add_parser("warp", parents=[common], help="warp a volume with a solved displacement field")
    w.add_argument("config")
    w.set_defaults(func=cmd_warp)

    m = sub.add_parser("metrics", parents=[common], help="percentile Hausdorff distance of two point sets")
    m.add_argument("a", help="CSV of x,y,z points (mm)")
    m.add_argument("b", help="CSV of x,y,z points (mm)")
    m.add_argument("--percentile", type=float, default=95.0)
    m.add_argument("--threshold", type=float, default=1.7, help="success threshold in mm")
    m.add_argument("--output", help="also write the JSON report here")
    m.set_defaults(func=cmd_metrics)

    v = sub.add_parser("verify", parents=[common], help="run the built-in verification suites")
    v.add_argument("suite", nargs="?", default=None, help="suite name(s), comma separated (default: all)")
    v.add_argument("--report", help="write the deterministic JSON report here")
    v.add_argument("--timings", help="write per-suite wall-clock seconds here")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is None:
            args.threads = default_threads()
        if args.threads < 1:
            raise TledError("--threads must be >= 1")
        return args.func(args)
    except (TledError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
