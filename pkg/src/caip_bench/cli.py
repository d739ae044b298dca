"""Command-line surface: run, validate, report, diff.

Exit codes are a stable contract for CI: 0 success, 1 scenario error,
2 invariant abort (a partial trace is still written for debugging),
3 I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys

from .knowledge import InvalidPolicy, KpiOrderViolation, KpiStore, aggregate
from .model import IllegalTransition
from .runner import SimulationRun, compare_traces, emit, write_artifacts
from .scenario import ParseError, Scenario, UnresolvedReference, load_bundled, load_scenario

EXIT_OK = 0
EXIT_SCENARIO_ERROR = 1
EXIT_INVARIANT_ABORT = 2
EXIT_IO_ERROR = 3


def _strict_override(args):
    if args.permissive:
        return False
    if args.strict:
        return True
    return None


def _load(path: str, strict_override=None) -> Scenario:
    """Load a scenario file, falling back to a bundled scenario name."""
    if os.path.exists(path):
        return load_scenario(path, strict_override=strict_override)
    try:
        return load_bundled(path, strict_override=strict_override)
    except FileNotFoundError:
        raise ParseError(f"scenario not found: {path}")


def _parse_batch(spec: str) -> range:
    lo, _, hi = spec.partition("..")
    return range(int(lo), int(hi) + 1)


def _run_once(scenario: Scenario, seed, out_dir: str, report_format: str) -> int:
    run = SimulationRun(scenario, seed_override=seed)
    try:
        result = run.run()
    except (IllegalTransition, KpiOrderViolation) as exc:
        print(f"invariant abort: {exc}", file=sys.stderr)
        emit(
            "\n".join(run.trace_lines) + "\n",
            os.path.join(out_dir, "trace.partial.tsv"),
        )
        return EXIT_INVARIANT_ABORT
    paths = write_artifacts(result, out_dir, report_format)
    for path in paths:
        print(path)
    return EXIT_OK


def cmd_run(args) -> int:
    scenario = _load(args.scenario, _strict_override(args))
    if args.batch:
        for seed in _parse_batch(args.batch):
            out_dir = os.path.join(args.out, f"seed-{seed}")
            status = _run_once(scenario, seed, out_dir, args.format)
            if status != EXIT_OK:
                return status
        return EXIT_OK
    return _run_once(scenario, args.seed, args.out, args.format)


def cmd_validate(args) -> int:
    scenario = _load(args.scenario, _strict_override(args))
    print(
        f"ok: {scenario.name} ({len(scenario.nodes)} nodes, "
        f"{len(scenario.domains)} domains, {len(scenario.script)} script events)"
    )
    return EXIT_OK


def cmd_report(args) -> int:
    with open(args.kpi, "r", encoding="utf-8") as handle:
        store = KpiStore.load_jsonl(handle.read())
    report = aggregate(store)
    if args.format in ("all", "structured"):
        path = os.path.join(args.out, "kpi.json")
        emit(report.render_structured(), path)
        print(path)
    if args.format in ("all", "flat"):
        path = os.path.join(args.out, "kpi.tsv")
        emit(report.render_flat(), path)
        print(path)
    return EXIT_OK


def cmd_diff(args) -> int:
    verdict, detail = compare_traces(args.path_a, args.path_b)
    if verdict == "equal":
        print("equal")
        return EXIT_OK
    line_no, a_line, b_line = detail
    print(f"first divergence at line {line_no}:")
    print(f"a: {a_line}")
    print(f"b: {b_line}")
    return EXIT_SCENARIO_ERROR


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="caip-bench",
        description="Deterministic coordination-plane simulator for clinical workflows",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_governance_flags(p):
        group = p.add_mutually_exclusive_group()
        group.add_argument("--strict", action="store_true",
                           help="force strict (default-deny) governance")
        group.add_argument("--permissive", action="store_true",
                           help="allow unlisted domains to emit metadata")

    p_run = sub.add_parser("run", help="execute a scenario and write artifacts")
    p_run.add_argument("--scenario", required=True,
                       help="scenario file path or bundled name (e.g. icu_reference)")
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
    p_run.add_argument("--out", default="out", help="output directory")
    p_run.add_argument("--batch", default=None, metavar="S1..S2",
                       help="run an inclusive seed range, one subdirectory per seed")
    p_run.add_argument("--format", choices=("structured", "flat", "all"), default="all")
    add_governance_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_val = sub.add_parser("validate", help="load and validate a scenario")
    p_val.add_argument("--scenario", required=True)
    add_governance_flags(p_val)
    p_val.set_defaults(func=cmd_validate)

    p_rep = sub.add_parser("report", help="re-aggregate a stored KPI record stream")
    p_rep.add_argument("--kpi", required=True, help="path to kpi_records.jsonl")
    p_rep.add_argument("--out", default="out")
    p_rep.add_argument("--format", choices=("structured", "flat", "all"), default="all")
    p_rep.set_defaults(func=cmd_report)

    p_diff = sub.add_parser("diff", help="byte-compare two trace files")
    p_diff.add_argument("path_a")
    p_diff.add_argument("path_b")
    p_diff.set_defaults(func=cmd_diff)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, UnresolvedReference, InvalidPolicy) as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO_ERROR
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO_ERROR


if __name__ == "__main__":
    sys.exit(main())
