"""Move a patient's ledger to a different institution.

The chain itself never changes — same chain id, same validator identities,
same blocks. What moves is custody: the new institution starts fresh node
processes holding the same validator credentials at new endpoints, those
replicas pull the full history from the still-running old nodes and verify
every block, and only then is a RELOCATE record committed on the routing
chain repointing the patient. The old nodes are retired last, so a reader
resolving the route always finds a complete replica. Writes submitted
while the move is in flight are not part of the deal; the harness does
not write during a move.
"""
from __future__ import annotations

import logging
import os
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .. import httpd
from ..connector import Connector, ConnectorConfig
from ..errors import InvalidRequest, TransportError
from ..identity import load_credential
from ..node import NodeConfig, load_node_config, save_node_config
from ..routing import RoutingEntry, resolve_route
from . import topology as topo_mod
from .topology import Topology, TopologyPlan, patient_chain_id

log = logging.getLogger(__name__)

SYNC_TIMEOUT = 30.0


def _relocated_configs(
    old_configs: Sequence[NodeConfig],
    new_institution: str,
    host: str,
    ports: Sequence[int],
    root: str,
) -> list[NodeConfig]:
    """Same identities and chain, new endpoints and data dirs."""
    endpoints = {
        cfg.node_id: f"{host}:{port}" for cfg, port in zip(old_configs, ports)
    }
    new_configs = []
    for cfg in old_configs:
        suffix = cfg.node_id.rsplit("-", 1)[1]  # validator ordinal, e.g. "v2"
        new_configs.append(
            replace(
                cfg,
                host=host,
                port=int(endpoints[cfg.node_id].rsplit(":", 1)[1]),
                data_dir=os.path.join(root, new_institution, f"{cfg.chain.chain_id}-{suffix}"),
                peers={k: v for k, v in endpoints.items() if k != cfg.node_id},
            )
        )
    return new_configs


def _wait_synced(endpoints: Sequence[str], sources: Sequence[str], target: int) -> None:
    """Drive each new replica's sync until it holds the full history."""
    deadline = time.monotonic() + SYNC_TIMEOUT
    for endpoint in endpoints:
        url = f"{httpd.base_url(endpoint)}/sync"
        while True:
            doc = httpd.request_json("POST", url, {"endpoints": list(sources)})
            if doc["height"] >= target:
                break
            if time.monotonic() > deadline:
                raise TransportError(
                    f"replica {endpoint} stuck at height {doc['height']} "
                    f"of {target} while relocating"
                )
            time.sleep(0.1)


def _check_move(entry: RoutingEntry, new_institution: str) -> None:
    if entry.institution == new_institution:
        raise InvalidRequest(
            f"ledger of {entry.patient_id!r} is already hosted by {new_institution!r}"
        )


def relocate_in_topology(
    topo: Topology, patient_id: str, new_institution: str
) -> RoutingEntry:
    """Thread-mode custody move; returns the new routing entry."""
    plan = topo.plan
    if new_institution not in {i.id for i in plan.spec.institutions}:
        raise InvalidRequest(f"unknown institution {new_institution!r}")
    old_configs = plan.patient_nodes.get(patient_id)
    if not old_configs:
        raise InvalidRequest(f"no patient {patient_id!r} in this topology")
    entry = resolve_route(plan.main_endpoints, patient_id)
    _check_move(entry, new_institution)

    old_endpoints = [cfg.endpoint for cfg in old_configs]
    target_height = max(topo.nodes[cfg.node_id][0].height for cfg in old_configs)
    ports = httpd.allocate_ports(len(old_configs))
    new_configs = _relocated_configs(
        old_configs, new_institution, plan.spec.host, ports, plan.root
    )

    # Old and new replicas briefly share node ids; set the old handles aside
    # so the registry tracks the replicas that will survive.
    old_handles = [topo.nodes.pop(cfg.node_id) for cfg in old_configs]
    try:
        new_nodes = [topo.start_node(cfg) for cfg in new_configs]
        for node in new_nodes:
            node.sync_from_peers(old_endpoints)
            if node.height < target_height:
                raise TransportError(
                    f"replica {node.config.endpoint} only reached height {node.height}"
                )
        connector = plan.connector(new_institution)
        connector.relocate_patient(
            patient_id, patient_chain_id(patient_id), [c.endpoint for c in new_configs]
        )
    except BaseException:
        for cfg in new_configs:
            if cfg.node_id in topo.nodes:
                topo.stop_node(cfg.node_id)
        for (node, handle), cfg in zip(old_handles, old_configs):
            topo.nodes[cfg.node_id] = (node, handle)
        raise

    for _, handle in old_handles:
        handle.stop()
    plan.patient_nodes[patient_id] = new_configs
    topo_mod._write_configs(plan)
    return resolve_route(plan.main_endpoints, patient_id)


def relocate_in_state(root: str, patient_id: str, new_institution: str) -> RoutingEntry:
    """Process-mode custody move driven purely over the wire protocols."""
    state = topo_mod.load_state(root)
    if new_institution not in state["institutions"]:
        raise InvalidRequest(f"unknown institution {new_institution!r}")
    patient = state.get("patients", {}).get(patient_id)
    if patient is None:
        raise InvalidRequest(f"no patient {patient_id!r} in this deployment")
    main_endpoints = list(state["main"]["endpoints"].values())
    entry = resolve_route(main_endpoints, patient_id)
    _check_move(entry, new_institution)

    node_ids = sorted(patient["endpoints"])
    old_configs = [
        load_node_config(topo_mod._config_path(root, "node", node_id))
        for node_id in node_ids
    ]
    old_endpoints = [cfg.endpoint for cfg in old_configs]
    target_height = max(
        httpd.request_json("GET", f"{httpd.base_url(ep)}/height")["height"]
        for ep in old_endpoints
    )

    ports = httpd.allocate_ports(len(old_configs))
    new_configs = _relocated_configs(
        old_configs, new_institution, state["host"], ports, root
    )
    for cfg in new_configs:
        save_node_config(cfg, topo_mod._config_path(root, "node", cfg.node_id))

    new_procs = []
    for cfg in new_configs:
        proc = topo_mod._spawn("node", cfg.node_id, topo_mod._config_path(root, "node", cfg.node_id), root)
        new_procs.append({"kind": "node", "id": cfg.node_id, "pid": proc.pid, "endpoint": cfg.endpoint})
    try:
        for cfg in new_configs:
            topo_mod.wait_healthy(cfg.endpoint)
        _wait_synced([c.endpoint for c in new_configs], old_endpoints, target_height)

        credential = load_credential(Path(root) / "credentials" / f"{new_institution}.json")
        store = state["institutions"][new_institution].get("store", "")
        connector = Connector(
            ConnectorConfig(
                institution_id=new_institution,
                credential=credential,
                mode="via_main",
                main_endpoints=tuple(main_endpoints),
                store_endpoint=store,
            )
        )
        connector.relocate_patient(
            patient_id, patient["chain_id"], [c.endpoint for c in new_configs]
        )
    except BaseException:
        for proc in new_procs:
            topo_mod._terminate(proc["pid"])
        raise

    old_ids = set(node_ids)
    for proc in state["processes"]:
        if proc["kind"] == "node" and proc["id"] in old_ids:
            topo_mod._terminate(proc["pid"])
    state["processes"] = [
        p for p in state["processes"] if not (p["kind"] == "node" and p["id"] in old_ids)
    ] + new_procs
    patient["institution"] = new_institution
    patient["endpoints"] = {c.node_id: c.endpoint for c in new_configs}
    topo_mod.write_state(root, state)
    return resolve_route(main_endpoints, patient_id)
