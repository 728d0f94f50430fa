"""Command line for running and exercising a federation.

    pht up <topology.json>        launch every service as its own process
    pht down                      stop a deployment started with ``up``
    pht status                    what is running, and is it healthy
    pht scenario paula            scripted multi-institution walkthrough
    pht bench                     time the five everyday operations
    pht relocate <patient> <institution>
                                  move a patient's ledger between hosts

Deployment state (configs, credentials, chain data, state.json) lives
under ``--root`` (default ``./.pht``, or $PHT_ROOT). The ``run-node`` /
``run-store`` / ``run-gateway`` commands are the per-service entry points
``up`` spawns; they are not meant to be typed by hand.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile

from . import __version__
from .errors import PhtError
from .gateway import load_gateway_config, run_gateway_blocking
from .harness.bench import (
    DEFAULT_PAYLOAD_BYTES,
    DEFAULT_RUNS,
    DEFAULT_VALIDATORS,
    run_benchmark,
)
from .harness.relocation import relocate_in_state
from .harness.scenario import run_paula_scenario
from .harness.topology import (
    launch_processes,
    load_state,
    load_topology_spec,
    plan_topology,
    stop_state,
)
from .node import load_node_config, run_node_blocking
from .resources import load_store_config, run_store_blocking

log = logging.getLogger(__name__)


def _default_root() -> str:
    return os.environ.get("PHT_ROOT", os.path.join(os.getcwd(), ".pht"))


def _add_root(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--root",
        default=None,
        help="state directory (default: $PHT_ROOT or ./.pht)",
    )


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def cmd_up(args: argparse.Namespace) -> int:
    root = args.root or _default_root()
    spec = load_topology_spec(args.topology)
    plan = plan_topology(spec, root)
    state = launch_processes(plan)
    print(f"deployment {state['name']!r} is up (root: {state['root']})")
    print("main chain:")
    for node_id, endpoint in sorted(state["main"]["endpoints"].items()):
        mark = " (leader)" if node_id == state["main"]["leader"] else ""
        print(f"  {node_id:<24} {endpoint}{mark}")
    for pid, patient in sorted(state["patients"].items()):
        print(f"patient ledger {patient['chain_id']!r} @ {patient['institution']}:")
        for node_id, endpoint in sorted(patient["endpoints"].items()):
            print(f"  {node_id:<24} {endpoint}")
    for inst, info in sorted(state["institutions"].items()):
        extras = []
        if info["store"]:
            extras.append(f"store {info['store']}")
        if info["gateway"]:
            extras.append(f"gateway {info['gateway']} (token: {info['tokens'][0]})")
        if extras:
            print(f"{inst}: " + ", ".join(extras))
    return 0


def cmd_down(args: argparse.Namespace) -> int:
    root = args.root or _default_root()
    stopped = stop_state(root)
    print(f"stopped {stopped} processes")
    return 0


def cmd_status(args: argparse.Namespace) -> int:
    from . import httpd

    root = args.root or _default_root()
    state = load_state(root)
    print(f"deployment {state['name']!r} (root: {state['root']})")
    exit_code = 0
    for proc in state["processes"]:
        try:
            os.kill(proc["pid"], 0)
            alive = True
        except (ProcessLookupError, PermissionError):
            alive = False
        health = "-"
        if alive:
            try:
                doc = httpd.request_json(
                    "GET",
                    f"{httpd.base_url(proc['endpoint'])}/health",
                    timeout=(1.0, 2.0),
                )
                health = doc.get("status", "?")
                if "height" in doc:
                    health += f" (height {doc['height']})"
            except PhtError as exc:
                health = f"unhealthy: {exc}"
        if not alive or health.startswith("unhealthy"):
            exit_code = 1
        print(
            f"  {proc['kind']:<8} {proc['id']:<24} pid {proc['pid']:<8} "
            f"{proc['endpoint']:<22} {'up' if alive else 'DOWN':<5} {health}"
        )
    return exit_code


def cmd_scenario(args: argparse.Namespace) -> int:
    root = args.root
    cleanup = False
    if root is None:
        root = tempfile.mkdtemp(prefix="pht-scenario-")
        cleanup = True
    try:
        report = run_paula_scenario(root, emit=print)
        return 0 if report["ok"] else 1
    finally:
        if cleanup:
            shutil.rmtree(root, ignore_errors=True)


def cmd_bench(args: argparse.Namespace) -> int:
    root = args.root
    cleanup = False
    if root is None:
        root = tempfile.mkdtemp(prefix="pht-bench-")
        cleanup = True
    try:
        report = run_benchmark(
            runs=args.runs,
            validators=args.validators,
            payload_bytes=args.payload_bytes,
            root=root,
            emit=print if args.verbose else None,
        )
        if args.json:
            print(json.dumps(report.to_doc(), indent=2))
        else:
            print(report.format_table())
        if not report.ordering_ok:
            print(
                "warning: quorum write did not dominate the read operations; "
                "results are suspect",
                file=sys.stderr,
            )
            return 1
        return 0
    finally:
        if cleanup:
            shutil.rmtree(root, ignore_errors=True)


def cmd_relocate(args: argparse.Namespace) -> int:
    root = args.root or _default_root()
    entry = relocate_in_state(root, args.patient, args.institution)
    print(
        f"ledger {entry.chain_id!r} of {entry.patient_id!r} now hosted by "
        f"{entry.institution}: {', '.join(entry.endpoints)}"
    )
    return 0


def cmd_run_node(args: argparse.Namespace) -> int:
    run_node_blocking(load_node_config(args.config))
    return 0


def cmd_run_store(args: argparse.Namespace) -> int:
    run_store_blocking(load_store_config(args.config))
    return 0


def cmd_run_gateway(args: argparse.Namespace) -> int:
    run_gateway_blocking(load_gateway_config(args.config))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pht",
        description="per-patient ledger federation: deploy, exercise, measure",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="log at DEBUG instead of WARNING"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("up", help="launch a deployment from a topology file")
    p.add_argument("topology", help="topology JSON file")
    _add_root(p)
    p.set_defaults(fn=cmd_up)

    p = sub.add_parser("down", help="stop a running deployment")
    _add_root(p)
    p.set_defaults(fn=cmd_down)

    p = sub.add_parser("status", help="show deployment processes and health")
    _add_root(p)
    p.set_defaults(fn=cmd_status)

    p = sub.add_parser("scenario", help="run a scripted walkthrough")
    p.add_argument("name", choices=["paula"], help="scenario name")
    _add_root(p)
    p.set_defaults(fn=cmd_scenario)

    p = sub.add_parser("bench", help="time the five everyday operations")
    p.add_argument(
        "--runs", type=_positive_int, default=DEFAULT_RUNS, help="runs per operation"
    )
    p.add_argument(
        "--validators",
        type=_positive_int,
        default=DEFAULT_VALIDATORS,
        help="patient-chain validator count",
    )
    p.add_argument(
        "--payload-bytes",
        type=_positive_int,
        default=DEFAULT_PAYLOAD_BYTES,
        help="evidence payload size",
    )
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    _add_root(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("relocate", help="move a patient's ledger to another institution")
    p.add_argument("patient", help="patient id")
    p.add_argument("institution", help="destination institution id")
    _add_root(p)
    p.set_defaults(fn=cmd_relocate)

    for kind, fn in (("node", cmd_run_node), ("store", cmd_run_store), ("gateway", cmd_run_gateway)):
        p = sub.add_parser(f"run-{kind}", help=f"serve one {kind} process (used by `up`)")
        p.add_argument("--config", required=True, help=f"{kind} config JSON file")
        p.set_defaults(fn=fn)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    # Service processes log their own lifecycle at INFO.
    if args.command.startswith("run-") and not args.verbose:
        logging.getLogger("pht").setLevel(logging.INFO)
    try:
        return args.fn(args)
    except PhtError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
