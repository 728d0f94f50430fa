"""Latency benchmark for the five everyday federation operations.

Brings up a minimal single-institution federation (the patient ledger's
validator count is the main knob), then times each operation over a fixed
number of runs and reports mean/min/max seconds:

    Locate patient's blockchain      route lookup on the main chain
    Save evidence's resource         payload upload to the store
    Add evidence to patient's blockchain
                                     route + sign + quorum commit
    Retrieve evidence's resource     payload download + hash check
    Recover evidences from patient's blockchain
                                     full trajectory read

Adding evidence is the only quorum write in the set, so its mean is
expected to dominate both the lookup and the trajectory read; the report
carries that check as ``ordering_ok``.
"""
from __future__ import annotations

import os
import platform
import time
from dataclasses import dataclass
from typing import Callable

from ..resources import fetch_evidence, save_evidence
from ..routing import resolve_route
from .topology import InstitutionSpec, PatientSpec, TopologySpec, launch_threads, plan_topology

OP_LOCATE = "Locate patient's blockchain"
OP_SAVE = "Save evidence's resource"
OP_ADD = "Add evidence to patient's blockchain"
OP_RETRIEVE = "Retrieve evidence's resource"
OP_RECOVER = "Recover evidences from patient's blockchain"

OPERATIONS = (OP_LOCATE, OP_SAVE, OP_ADD, OP_RETRIEVE, OP_RECOVER)

DEFAULT_RUNS = 20
DEFAULT_VALIDATORS = 3
DEFAULT_PAYLOAD_BYTES = 1024

BENCH_INSTITUTION = "bench-hospital"
BENCH_PATIENT = "bench-patient"


@dataclass(frozen=True)
class OperationStats:
    operation: str
    runs: int
    mean_s: float
    min_s: float
    max_s: float

    def to_doc(self) -> dict:
        return {
            "operation": self.operation,
            "runs": self.runs,
            "mean_s": self.mean_s,
            "min_s": self.min_s,
            "max_s": self.max_s,
        }


def environment_note() -> str:
    """Where these numbers were measured; they are not comparable elsewhere."""
    return (
        f"{platform.platform()} / Python {platform.python_version()} / "
        f"{os.cpu_count() or '?'} cpus / all services on one host"
    )


@dataclass(frozen=True)
class BenchmarkReport:
    runs: int
    validators: int
    payload_bytes: int
    stats: tuple[OperationStats, ...]
    ordering_ok: bool
    environment: str = ""
    topology: dict | None = None

    def stat(self, operation: str) -> OperationStats:
        for s in self.stats:
            if s.operation == operation:
                return s
        raise KeyError(operation)

    def to_doc(self) -> dict:
        return {
            "runs": self.runs,
            "validators": self.validators,
            "payload_bytes": self.payload_bytes,
            "operations": [s.to_doc() for s in self.stats],
            "ordering_ok": self.ordering_ok,
            "environment": self.environment,
            "topology": self.topology or {},
        }

    def format_table(self) -> str:
        width = max(len(op) for op in OPERATIONS)
        lines = [
            f"{'operation':<{width}}  {'mean (s)':>10}  {'min (s)':>10}  {'max (s)':>10}",
            "-" * (width + 38),
        ]
        for s in self.stats:
            lines.append(
                f"{s.operation:<{width}}  {s.mean_s:>10.4f}  {s.min_s:>10.4f}  {s.max_s:>10.4f}"
            )
        lines.append(
            f"({self.runs} runs, {self.validators} patient-chain validators, "
            f"{self.payload_bytes} byte payloads)"
        )
        if self.environment:
            lines.append(f"environment: {self.environment}")
        return "\n".join(lines)


def bench_topology_spec(validators: int) -> TopologySpec:
    return TopologySpec(
        name="bench",
        institutions=(InstitutionSpec(id=BENCH_INSTITUTION, gateway=False),),
        patients=(
            PatientSpec(
                id=BENCH_PATIENT,
                institution=BENCH_INSTITUTION,
                validators=validators,
                writers=(BENCH_INSTITUTION,),
            ),
        ),
    )


def _summarize(operation: str, samples: list[float]) -> OperationStats:
    return OperationStats(
        operation=operation,
        runs=len(samples),
        mean_s=sum(samples) / len(samples),
        min_s=min(samples),
        max_s=max(samples),
    )


def run_benchmark(
    runs: int = DEFAULT_RUNS,
    validators: int = DEFAULT_VALIDATORS,
    payload_bytes: int = DEFAULT_PAYLOAD_BYTES,
    root: str = "",
    emit: Callable[[str], None] | None = None,
) -> BenchmarkReport:
    """Time every operation ``runs`` times against a fresh federation."""
    if runs < 1:
        raise ValueError("runs must be at least 1")
    if payload_bytes < 1:
        raise ValueError("payload_bytes must be at least 1")

    plan = plan_topology(bench_topology_spec(validators), root)
    topo = launch_threads(plan)
    samples: dict[str, list[float]] = {op: [] for op in OPERATIONS}
    try:
        connector = topo.connector(BENCH_INSTITUTION)
        store = plan.stores[BENCH_INSTITUTION].endpoint

        # Warm-up: first contact pays thread/socket setup, not protocol cost.
        resolve_route(topo.main_endpoints, BENCH_PATIENT)
        connector.add_evidence(BENCH_PATIENT, b"warm-up", note="warm-up")

        def timed(operation: str, fn: Callable[[], object]) -> object:
            start = time.perf_counter()
            result = fn()
            samples[operation].append(time.perf_counter() - start)
            return result

        for run in range(runs):
            payload = os.urandom(payload_bytes)
            timed(OP_LOCATE, lambda: resolve_route(topo.main_endpoints, BENCH_PATIENT))
            ref = timed(OP_SAVE, lambda: save_evidence(store, payload))
            timed(OP_ADD, lambda: connector.add_reference(BENCH_PATIENT, ref))
            timed(OP_RETRIEVE, lambda: fetch_evidence(ref))
            timed(OP_RECOVER, lambda: connector.get_trajectory(BENCH_PATIENT))
            if emit:
                emit(f"  run {run + 1}/{runs} done")
    finally:
        topo.stop()

    stats = tuple(_summarize(op, samples[op]) for op in OPERATIONS)
    by_op = {s.operation: s for s in stats}
    ordering_ok = (
        by_op[OP_ADD].mean_s > by_op[OP_LOCATE].mean_s
        and by_op[OP_ADD].mean_s > by_op[OP_RECOVER].mean_s
    )
    spec = plan.spec
    return BenchmarkReport(
        runs=runs,
        validators=validators,
        payload_bytes=payload_bytes,
        stats=stats,
        ordering_ok=ordering_ok,
        environment=environment_note(),
        topology={
            "name": spec.name,
            "host": spec.host,
            "institutions": [i.id for i in spec.institutions],
            "patients": {
                p.id: {"institution": p.institution, "validators": p.validators}
                for p in spec.patients
            },
            "main_nodes": len(plan.main_nodes),
            "stores": sorted(plan.stores),
        },
    )
