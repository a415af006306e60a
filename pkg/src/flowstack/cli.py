"""Command-line driver: run, simulate, serve, trace.

Exit codes are a stable contract: 0 success, 1 usage/config errors,
2 workload failures (some task FAILED or CANCELED), 3 trace violations.
Every flag has an environment override with the ``FLOWSTACK_`` prefix.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import signal
import sys
import time
from pathlib import Path

import yaml

from . import checks
from .access import LOCAL, SIMBATCH, ResourceAccess
from .bridge import BridgeService
from .pilot import PilotDescription, PilotRuntime
from .tracking import (CANCELED, DONE, FAILED, VirtualClock, read_trace,
                       standard_registry)
from .workflow import ValidationFailed, WorkflowError, load_workflow, run, validate_workflow
from .workload import CatalogError, WorkloadError, WorkloadManager, load_catalog

log = logging.getLogger(__name__)

ENV_PREFIX = "FLOWSTACK_"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_WORKLOAD = 2
EXIT_VIOLATIONS = 3


def _env(name: str, fallback=None):
    return os.environ.get(ENV_PREFIX + name, fallback)


def _env_flag(name: str) -> bool:
    return str(_env(name, "")).lower() in ("1", "true", "yes", "on")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowstack",
        description="Run workflows over pilots on local or simulated resources.")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v for info, -vv for debug")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--catalog", required=True, help="resource catalog file")
        p.add_argument("--run-dir", default=_env("RUN_DIR"),
                       help="directory for sandboxes, trace and report")
        p.add_argument("--backfill", action="store_true",
                       default=_env_flag("BACKFILL"),
                       help="enable pilot-level backfill scheduling")
        p.add_argument("--concurrency-cap", type=int,
                       default=int(_env("CONCURRENCY_CAP", 32)),
                       help="max concurrent tasks sized into one pilot")
        p.add_argument("--seed", type=int, default=int(_env("SEED", 0)),
                       help="seed for randomized policies (tie-breaks are "
                            "deterministic; reserved)")
        p.add_argument("--json", action="store_true", default=_env_flag("JSON"),
                       help="print the full report as JSON")

    p_run = sub.add_parser("run", help="execute a workflow on local resources")
    p_run.add_argument("workflow", help="workflow description file")
    common(p_run)

    p_sim = sub.add_parser("simulate",
                           help="execute a workflow on simulated batch resources")
    p_sim.add_argument("workflow")
    common(p_sim)
    p_sim.add_argument("--scenario", help="background-load scenario file")

    p_serve = sub.add_parser("serve", help="serve pilots as a REST resource queue")
    p_serve.add_argument("--catalog", required=True)
    p_serve.add_argument("--pilot", action="append", default=[],
                         metavar="RESOURCE:CORES:WALLTIME[:GPUS]",
                         help="pilot to start (repeatable)")
    p_serve.add_argument("--bind", default="127.0.0.1:8677", help="host:port")
    p_serve.add_argument("--run-dir", default=_env("RUN_DIR"))

    p_trace = sub.add_parser("trace", help="validate a trace file")
    p_trace.add_argument("trace", help="trace file (newline-delimited records)")
    p_trace.add_argument("--check", action="append", default=[],
                         help=f"check to run (default: all of {', '.join(checks.CHECK_NAMES)})")
    return parser


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _pick_run_dir(arg) -> Path:
    if arg:
        return Path(arg)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return Path("runs") / f"{stamp}-{os.getpid()}"


def _report_out(report, as_json: bool) -> None:
    if as_json:
        print(json.dumps(report.to_dict(), indent=2))
        return
    states = report.task_states
    print(f"workflow {report.workflow_uid}: {len(states)} tasks, "
          f"{sum(1 for s in states.values() if s == DONE)} done, "
          f"{sum(1 for s in states.values() if s in (FAILED, CANCELED))} failed/canceled")
    print(f"{'makespan' if report.virtual else 'wall time'}: {report.wall_time_s:.3f} s "
          f"over {report.workload_count} workload(s)")
    for p in report.pilots:
        wait = "n/a" if p.queue_wait_s is None else f"{p.queue_wait_s:.3f} s"
        print(f"pilot {p.pilot_uid} on {p.resource_id}: {p.cores} cores, "
              f"queue wait {wait}, {p.state}")
    print(f"report: {report.run_dir}/report.json")
    print(f"trace:  {report.trace_path}")


def _execute(args, virtual: bool) -> int:
    random.seed(args.seed)
    try:
        entries = load_catalog(args.catalog)
        workflow = load_workflow(args.workflow)
    except (OSError, yaml.YAMLError, CatalogError, WorkflowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    defects = validate_workflow(workflow)
    if defects:
        for d in defects:
            print(f"error: {d.kind} at {d.where}: {d.detail}", file=sys.stderr)
        return EXIT_USAGE
    wanted = SIMBATCH if virtual else LOCAL
    entries = [e for e in entries if e.backend == wanted]
    if not entries:
        print(f"error: catalog has no {wanted} resources", file=sys.stderr)
        return EXIT_USAGE

    run_dir = _pick_run_dir(args.run_dir)
    registry = standard_registry(VirtualClock() if virtual else None)
    access = ResourceAccess(entries, registry, run_dir=run_dir)
    if virtual and getattr(args, "scenario", None):
        try:
            _inject_scenario(access, args.scenario)
        except (OSError, yaml.YAMLError, KeyError, ValueError) as exc:
            print(f"error: scenario: {exc}", file=sys.stderr)
            return EXIT_USAGE
    runtime = PilotRuntime(access, registry, run_dir, backfill=args.backfill)
    manager = WorkloadManager(entries, runtime, concurrency_cap=args.concurrency_cap)
    try:
        report = run(workflow, manager, run_dir)
    except (ValidationFailed, WorkloadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _report_out(report, args.json)
    return EXIT_OK if report.all_done else EXIT_WORKLOAD


def _inject_scenario(access: ResourceAccess, path) -> None:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    rows = (data or {}).get("background", []) or []
    per_resource: dict[str, list] = {}
    for row in rows:
        per_resource.setdefault(str(row["resource_id"]), []).append(
            (float(row["arrival_s"]), int(row["cores"]), float(row["runtime_s"])))
    for resource_id, spec in per_resource.items():
        access.sim_cluster.inject_background_load(resource_id, spec)


def _parse_pilot_spec(spec: str) -> tuple[str, int, float, int]:
    parts = spec.split(":")
    if len(parts) not in (3, 4):
        raise ValueError(f"pilot spec must be RESOURCE:CORES:WALLTIME[:GPUS], got {spec!r}")
    gpus = int(parts[3]) if len(parts) == 4 else 0
    return parts[0], int(parts[1]), float(parts[2]), gpus


def cmd_serve(args) -> int:
    try:
        entries = [e for e in load_catalog(args.catalog) if e.backend == LOCAL]
        if not entries:
            raise CatalogError("serve requires local resources")
        host, _, port = args.bind.rpartition(":")
        if not host or not port:
            raise ValueError(f"bind address must be host:port, got {args.bind!r}")
        pilot_specs = [_parse_pilot_spec(s) for s in args.pilot]
    except (OSError, yaml.YAMLError, CatalogError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    run_dir = _pick_run_dir(args.run_dir)
    registry = standard_registry()
    access = ResourceAccess(entries, registry, run_dir=run_dir)
    runtime = PilotRuntime(access, registry, run_dir)
    pilots = []
    try:
        for resource_id, cores, walltime, gpus in pilot_specs:
            pilots.append(runtime.submit_pilot(
                PilotDescription(resource_id=resource_id, cores=cores,
                                 walltime_s=walltime, gpus=gpus)))
        service = BridgeService(runtime, pilots, host=host, port=int(port))
        service.start()
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"serving on {service.address} with {len(pilots)} pilot(s)", flush=True)

    def request_stop(signum, frame):
        service._stop.set()

    signal.signal(signal.SIGINT, request_stop)
    signal.signal(signal.SIGTERM, request_stop)
    try:
        service.run_forever()
    finally:
        service.stop()
        canceled = 0
        for pilot in pilots:
            if registry.current_state(pilot.uid) not in ("DONE", "FAILED", "CANCELED"):
                runtime.cancel_pilot(pilot)
                canceled += 1
        registry.export_trace(run_dir / "trace.jsonl")
        print(f"shut down, canceled {canceled} pilot(s)", flush=True)
    return EXIT_OK


def cmd_trace(args) -> int:
    names = tuple(args.check) if args.check else checks.CHECK_NAMES
    unknown = [n for n in names if n not in checks.CHECK_NAMES]
    if unknown:
        print(f"error: unknown check(s) {unknown}; "
              f"available: {', '.join(checks.CHECK_NAMES)}", file=sys.stderr)
        return EXIT_USAGE
    try:
        entities = read_trace(args.trace)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    violations = checks.run_checks(entities, names)
    for v in violations:
        print(f"{v.kind}: {v.uid}: {v.detail}")
    if violations:
        print(f"{len(violations)} violation(s) in {args.trace}")
        return EXIT_VIOLATIONS
    print(f"trace clean: {len(entities)} entities, checks: {', '.join(names)}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    if args.command == "run":
        return _execute(args, virtual=False)
    if args.command == "simulate":
        return _execute(args, virtual=True)
    if args.command == "serve":
        return cmd_serve(args)
    if args.command == "trace":
        return cmd_trace(args)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
