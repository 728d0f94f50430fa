"""Scripted multi-institution walkthrough of one patient's journey.

Paula's ledger is created and hosted by her home hospital (ES). While she
travels, a hospital that has never seen her (CN) treats her:

    1. A CN doctor finds Paula's ledger through CN's own routing node —
       no action from Paula, no call to any ES system.
    2. CN stores a glucose measurement in its own evidence store and
       commits the reference to Paula's ledger.
    3. An ES doctor reads the trajectory through ES's own node and pulls
       the CN-stored document, byte for byte.
    4. ES commits a follow-up record; both hospitals now read the same
       two records in the same order.

Extended steps then exercise the rest of the lifecycle: retraction,
revision, replica equality, custody relocation, and post-move writes.

Every step asserts what it claims. A failing step is marked in the report
with its cause and ends the run; nothing prints a happy line over broken
state.
"""
from __future__ import annotations

import json
import time
from typing import Callable

from ..errors import PhtError
from ..ledger import now_millis
from ..node import fetch_dump
from ..connector import Connector, ConnectorConfig
from .relocation import relocate_in_topology
from .topology import (
    InstitutionSpec,
    PatientSpec,
    Topology,
    TopologyPlan,
    TopologySpec,
    launch_threads,
    plan_topology,
)

HOME = "hospital-es"  # hosts Paula's ledger
VISITOR = "hospital-cn"  # treats her abroad, sight unseen
PATIENT = "paula"

CORE_STEPS = (
    "1 visiting doctor locates the ledger",
    "2 visiting hospital commits a glucose record",
    "3 home doctor reads the record back",
    "4 home hospital adds a follow-up",
)


class ScenarioFailure(PhtError):
    """A scenario step's outcome did not match what the script requires."""


def _expect(condition: bool, message: str) -> None:
    if not condition:
        raise ScenarioFailure(message)


def paula_topology_spec() -> TopologySpec:
    return TopologySpec(
        name="paula-journey",
        institutions=(
            InstitutionSpec(id=HOME),
            InstitutionSpec(id=VISITOR),
        ),
        patients=(
            PatientSpec(id=PATIENT, institution=HOME, validators=3),
        ),
    )


def _own_node_connector(plan: TopologyPlan, institution: str) -> Connector:
    """A connector that resolves routes only through its own hospital's node."""
    cfg = plan.connector_config(institution)
    own = next(n.endpoint for n in plan.main_nodes if n.node_id == institution)
    return Connector(
        ConnectorConfig(
            institution_id=cfg.institution_id,
            credential=cfg.credential,
            mode="via_main",
            main_endpoints=(own,),
            store_endpoint=cfg.store_endpoint,
        )
    )


def run_paula_scenario(
    root: str,
    emit: Callable[[str], None] = print,
    before_step: Callable[[str, Topology], None] | None = None,
    register: bool = True,
) -> dict:
    """Run the whole journey; returns a step-by-step report document.

    ``before_step`` is a hook for fault injection: it runs right before
    each step executes and may sabotage the topology. ``register=False``
    skips route seeding, so step 1 meets an unregistered patient.
    """
    plan = plan_topology(paula_topology_spec(), root)
    topo = launch_threads(plan, register=register)
    started = time.monotonic()

    ctx: dict = {}
    cn = _own_node_connector(plan, VISITOR)
    es = _own_node_connector(plan, HOME)

    def step_1() -> str:
        entry = cn.locate(PATIENT)
        _expect(entry.institution == HOME, "route must name the home hospital as custodian")
        _expect(
            tuple(entry.endpoints) == tuple(plan.patient_endpoints(PATIENT)),
            "route must list the ledger's node endpoints",
        )
        ctx["route"] = entry
        return f"{PATIENT} -> {entry.chain_id} @ {entry.institution}, via {VISITOR}'s own node"

    def step_2() -> str:
        doc = json.dumps(
            {
                "type": "glucose-measurement",
                "mmol_per_l": 6.1,
                "taken_at": now_millis(),
                "by": VISITOR,
            },
            sort_keys=True,
        ).encode("utf-8")
        ctx["glucose_bytes"] = doc
        ref = cn.save_payload(doc, media_hint="application/json")
        entry = cn.add_reference(PATIENT, ref, note="glucose measurement")
        _expect(entry.height == 1, "first clinical record must land at height 1")
        _expect(
            ref.url.split("//", 1)[-1].startswith(plan.stores[VISITOR].endpoint),
            "payload must sit in the visiting hospital's own store",
        )
        ctx["glucose"] = entry
        return f"payload in {VISITOR}'s store, reference committed at height {entry.height}"

    def step_3() -> str:
        history = es.get_trajectory(PATIENT)
        _expect(len(history) == 1, f"home hospital must see 1 record, saw {len(history)}")
        _expect(
            history[0].tx_id == ctx["glucose"].tx_id,
            "home hospital must see the visiting hospital's record",
        )
        payload, hint = es.fetch_evidence(history[0])
        _expect(payload == ctx["glucose_bytes"], "payload bytes must round-trip unaltered")
        _expect(hint == "application/json", f"media hint must survive, got {hint!r}")
        return f"{len(payload)} bytes byte-identical, media hint {hint}"

    def step_4() -> str:
        entry = es.add_evidence(
            PATIENT,
            b"follow-up: adjust basal insulin\n",
            media_hint="text/plain",
            note="follow-up",
        )
        ctx["followup"] = entry
        seen_home = [e.tx_id for e in es.get_trajectory(PATIENT)]
        seen_visitor = [e.tx_id for e in cn.get_trajectory(PATIENT)]
        _expect(
            seen_home == seen_visitor == [ctx["glucose"].tx_id, entry.tx_id],
            "both hospitals must read the same two records in the same order",
        )
        return f"both hospitals read {len(seen_home)} records in identical order"

    def step_retract() -> str:
        dup = es.add_evidence(
            PATIENT, b"follow-up: adjust basal insulin\n",
            media_hint="text/plain", note="follow-up (accidental duplicate)",
        )
        gone = es.delete_evidence(PATIENT, dup.tx_id, note="duplicate record")
        view = cn.current_view(PATIENT)
        _expect(
            [e.tx_id for e in view] == [ctx["glucose"].tx_id, ctx["followup"].tx_id],
            "retraction must remove the duplicate from the view, nothing else",
        )
        return f"DELETE at height {gone.height}; {len(view)} records in force"

    def step_revise() -> str:
        corrected = json.loads(ctx["glucose_bytes"].decode("utf-8"))
        corrected["mmol_per_l"] = 5.9
        corrected["correction"] = "meter recalibrated"
        payload = json.dumps(corrected, sort_keys=True).encode("utf-8")
        revised = cn.modify_evidence(
            PATIENT, ctx["glucose"].tx_id, payload,
            media_hint="application/json", note="corrected reading",
        )
        view = es.current_view(PATIENT)
        _expect(
            [e.tx_id for e in view] == [revised.tx_id, ctx["followup"].tx_id],
            "revision must replace the glucose record in place",
        )
        got, _ = es.fetch_evidence(view[0])
        _expect(got == payload, "revised payload bytes must round-trip")
        return f"MODIFY at height {revised.height}; slot kept its position"

    def step_replicas() -> str:
        dumps = {
            cfg.node_id: fetch_dump(cfg.endpoint)
            for cfg in plan.patient_nodes[PATIENT]
        }
        _expect(len(set(dumps.values())) == 1, "replicas must hold byte-identical ledgers")
        ctx["pre_move_dump"] = next(iter(dumps.values()))
        return f"{len(dumps)} replicas compared byte for byte"

    def step_relocate() -> str:
        moved = relocate_in_topology(topo, PATIENT, VISITOR)
        _expect(moved.institution == VISITOR, "route must now name the visiting hospital")
        post = fetch_dump(topo.patient_endpoints(PATIENT)[0])
        _expect(post == ctx["pre_move_dump"], "history must survive the move byte for byte")
        return f"custodian now {moved.institution}, ledger bytes unchanged"

    def step_post_move() -> str:
        entry = es.add_evidence(
            PATIENT, b"rehab referral\n", media_hint="text/plain", note="referral",
        )
        seen = cn.get_trajectory(PATIENT)
        _expect(
            seen[-1].tx_id == entry.tx_id,
            "the new host must serve records written after the move",
        )
        return f"write at height {entry.height} visible at the new host"

    script: list[tuple[str, Callable[[], str]]] = [
        (CORE_STEPS[0], step_1),
        (CORE_STEPS[1], step_2),
        (CORE_STEPS[2], step_3),
        (CORE_STEPS[3], step_4),
        ("extended: duplicate retracted", step_retract),
        ("extended: glucose record revised", step_revise),
        ("extended: replicas byte-identical", step_replicas),
        ("extended: custody relocated", step_relocate),
        ("extended: writes continue at new host", step_post_move),
    ]

    steps: list[dict] = []
    ok = True
    try:
        emit(f"paula scenario — {HOME} hosts, {VISITOR} visits, root {root}")
        for name, fn in script:
            if before_step is not None:
                before_step(name, topo)
            try:
                detail = fn()
            except PhtError as exc:
                steps.append({"name": name, "ok": False, "detail": str(exc)})
                emit(f"FAIL  {name} — {exc}")
                ok = False
                break
            steps.append({"name": name, "ok": True, "detail": detail})
            emit(f"  ok  {name} — {detail}")
    finally:
        topo.stop()

    elapsed = time.monotonic() - started
    emit(
        f"scenario {'passed' if ok else 'FAILED'}: "
        f"{sum(1 for s in steps if s['ok'])}/{len(script)} steps in {elapsed:.1f}s"
    )
    return {
        "scenario": "paula",
        "patient": PATIENT,
        "home": HOME,
        "visitor": VISITOR,
        "ok": ok,
        "steps": steps,
        "elapsed_seconds": round(elapsed, 3),
    }
