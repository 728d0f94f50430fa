"""Plan and launch a whole federation on one machine.

A topology file describes institutions and patients; planning turns that
into concrete service configs (ledger nodes, evidence stores, gateways)
with ports, data directories, and credentials, all rooted under one state
directory. The same plan launches two ways:

    launch_threads     every service on a daemon thread in this process
                       (tests, scenarios) — returns a Topology handle
    launch_processes   one OS process per service (the CLI's ``up``) —
                       writes ``state.json`` so a later ``down`` can stop it

Chain layout per plan: one shared routing chain validated by every
institution (node ids are institution ids), and per patient a dedicated
chain with its own validator credentials (``<chain>-v1``…), all hosted by
the patient's current institution. Institutions appear on patient chains
as writers, not validators, which is what lets a chain move between
institutions without touching its validator set.

Topology file format (JSON):

    {"name": "demo",
     "host": "127.0.0.1",          optional, default 127.0.0.1
     "base_port": 7400,            optional; 0 or absent -> free ports
     "main_leader": "hospital-a",  optional, default first institution
     "institutions": [
       {"id": "hospital-a", "store": true, "gateway": true,
        "base_port": 7500,         optional per-institution port block
        "tokens": ["s3cret"]}],    store/gateway default true,
                                   tokens generated when absent
     "patients": [
       {"id": "paula", "institution": "hospital-a",
        "validators": 3,           patient-chain validator count
        "writers": ["hospital-a"]}]}   default: every institution

An institution with its own ``base_port`` numbers all of its services
(main-chain node, hosted patient-chain nodes, store, gateway) from that
block; others fall back to the topology-wide block, or to free ports.
Any port claimed twice is a planning error — nothing is launched.
"""
from __future__ import annotations

import json
import logging
import os
import secrets
import signal
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .. import httpd
from ..connector import Connector, ConnectorConfig
from ..errors import AlreadyRegistered, InvalidRequest, PhtError, TransportError
from ..gateway import Gateway, GatewayConfig, run_gateway
from ..identity import Credential, generate_credential, load_credential, save_credential
from ..ledger import MAIN_SUBJECT
from ..node import ChainSpec, LedgerNode, NodeConfig, run_node
from ..resources import EvidenceStore, StoreConfig, run_store

log = logging.getLogger(__name__)

MAIN_CHAIN_ID = "main"
STATE_FILE = "state.json"
HEALTH_TIMEOUT = 20.0


@dataclass(frozen=True)
class InstitutionSpec:
    id: str
    store: bool = True
    gateway: bool = True
    tokens: tuple[str, ...] = ()
    base_port: int = 0  # 0: fall back to the topology-wide block / free ports


@dataclass(frozen=True)
class PatientSpec:
    id: str
    institution: str
    validators: int = 3
    writers: tuple[str, ...] = ()  # empty -> every institution


@dataclass(frozen=True)
class TopologySpec:
    name: str
    institutions: tuple[InstitutionSpec, ...]
    patients: tuple[PatientSpec, ...] = ()
    host: str = "127.0.0.1"
    base_port: int = 0
    main_leader: str = ""

    def __post_init__(self):
        if not self.name:
            raise InvalidRequest("topology needs a name")
        if not self.institutions:
            raise InvalidRequest("topology needs at least one institution")
        inst_ids = [i.id for i in self.institutions]
        if len(set(inst_ids)) != len(inst_ids):
            raise InvalidRequest("duplicate institution ids in topology")
        patient_ids = [p.id for p in self.patients]
        if len(set(patient_ids)) != len(patient_ids):
            raise InvalidRequest("duplicate patient ids in topology")
        for p in self.patients:
            if p.institution not in inst_ids:
                raise InvalidRequest(
                    f"patient {p.id!r} hosted by unknown institution {p.institution!r}"
                )
            if p.validators < 1:
                raise InvalidRequest(f"patient {p.id!r} needs at least one validator")
            for w in p.writers:
                if w not in inst_ids:
                    raise InvalidRequest(f"patient {p.id!r} lists unknown writer {w!r}")
            if p.id in inst_ids:
                raise InvalidRequest(f"{p.id!r} cannot be both patient and institution")
        if self.main_leader and self.main_leader not in inst_ids:
            raise InvalidRequest(f"main leader {self.main_leader!r} is not an institution")
        bases = [i.base_port for i in self.institutions if i.base_port] + (
            [self.base_port] if self.base_port else []
        )
        dupes = sorted({b for b in bases if bases.count(b) > 1})
        if dupes:
            raise InvalidRequest(f"port blocks declared twice: {dupes}")

    @property
    def leader(self) -> str:
        return self.main_leader or self.institutions[0].id


def topology_spec_from_doc(doc: Mapping) -> TopologySpec:
    try:
        institutions = tuple(
            InstitutionSpec(
                id=i["id"],
                store=i.get("store", True),
                gateway=i.get("gateway", True),
                tokens=tuple(i.get("tokens", [])),
                base_port=i.get("base_port", 0),
            )
            for i in doc["institutions"]
        )
        patients = tuple(
            PatientSpec(
                id=p["id"],
                institution=p["institution"],
                validators=p.get("validators", 3),
                writers=tuple(p.get("writers", [])),
            )
            for p in doc.get("patients", [])
        )
        return TopologySpec(
            name=doc["name"],
            institutions=institutions,
            patients=patients,
            host=doc.get("host", "127.0.0.1"),
            base_port=doc.get("base_port", 0),
            main_leader=doc.get("main_leader", ""),
        )
    except (KeyError, TypeError) as exc:
        raise InvalidRequest(f"bad topology document: {exc}") from exc


def load_topology_spec(path: str) -> TopologySpec:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return topology_spec_from_doc(json.load(fh))
    except FileNotFoundError:
        raise InvalidRequest(f"no topology file at {path}")
    except json.JSONDecodeError as exc:
        raise InvalidRequest(f"topology file {path} is not valid JSON: {exc}")


def patient_chain_id(patient_id: str) -> str:
    return f"{patient_id}-ledger"


@dataclass
class TopologyPlan:
    """A fully materialized deployment: every config written to disk."""

    spec: TopologySpec
    root: str
    credentials: dict[str, Credential]
    main_nodes: list[NodeConfig]
    patient_nodes: dict[str, list[NodeConfig]] = field(default_factory=dict)
    stores: dict[str, StoreConfig] = field(default_factory=dict)
    gateways: dict[str, GatewayConfig] = field(default_factory=dict)

    @property
    def main_endpoints(self) -> list[str]:
        return [n.endpoint for n in self.main_nodes]

    def patient_endpoints(self, patient_id: str) -> list[str]:
        return [n.endpoint for n in self.patient_nodes[patient_id]]

    def patient_spec(self, patient_id: str) -> PatientSpec:
        for p in self.spec.patients:
            if p.id == patient_id:
                return p
        raise InvalidRequest(f"no patient {patient_id!r} in this topology")

    def connector_config(self, institution: str) -> ConnectorConfig:
        cred = self.credentials[institution]
        store = self.stores.get(institution)
        return ConnectorConfig(
            institution_id=institution,
            credential=cred,
            mode="via_main",
            main_endpoints=tuple(self.main_endpoints),
            store_endpoint=store.endpoint if store else "",
        )

    def connector(self, institution: str) -> Connector:
        return Connector(self.connector_config(institution))


def _credential(root: str, actor_id: str, role: str) -> Credential:
    """Load the actor's credential from the state dir, minting it once."""
    path = Path(root) / "credentials" / f"{actor_id}.json"
    if path.exists():
        return load_credential(path)
    cred = generate_credential(actor_id, role)
    save_credential(cred, path)
    return cred


def _assign_ports(spec: TopologySpec, owners: Sequence[str]) -> list[int]:
    """One port per service, honoring per-institution port blocks.

    ``owners`` names the institution each service belongs to, in launch
    order. A service numbers from its institution's block if one is set,
    else from the topology-wide block, else gets a free OS-assigned port.
    Collisions and already-bound ports fail here, before anything starts.
    """
    counters: dict[str, int] = {
        i.id: i.base_port for i in spec.institutions if i.base_port
    }
    if spec.base_port:
        counters[""] = spec.base_port
    sources = [o if o in counters else "" if "" in counters else None for o in owners]
    ephemeral = iter(httpd.allocate_ports(sources.count(None)))
    ports: list[int] = []
    for src in sources:
        if src is None:
            ports.append(next(ephemeral))
        else:
            ports.append(counters[src])
            counters[src] += 1
    planned = [p for p, s in zip(ports, sources) if s is not None]
    dupes = sorted({p for p in planned if planned.count(p) > 1})
    if dupes:
        raise InvalidRequest(f"topology plans the same port twice: {dupes}")
    busy = sorted(p for p in set(planned) if not httpd.port_is_free(spec.host, p))
    if busy:
        raise InvalidRequest(f"ports already in use: {busy}")
    return ports


def plan_topology(spec: TopologySpec, root: str) -> TopologyPlan:
    """Turn a topology description into launchable service configs."""
    root = os.path.abspath(root)
    os.makedirs(os.path.join(root, "credentials"), exist_ok=True)
    os.makedirs(os.path.join(root, "configs"), exist_ok=True)
    os.makedirs(os.path.join(root, "logs"), exist_ok=True)

    creds = {i.id: _credential(root, i.id, "institution") for i in spec.institutions}
    for p in spec.patients:
        creds[p.id] = _credential(root, p.id, "patient")
        for i in range(1, p.validators + 1):
            # Chain-node identities are institution-operated: the hosting
            # institution holds their keys and runs their processes.
            vid = f"{patient_chain_id(p.id)}-v{i}"
            creds[vid] = _credential(root, vid, "institution")

    want_stores = [i for i in spec.institutions if i.store]
    want_gateways = [i for i in spec.institutions if i.gateway]
    owners: list[str] = [i.id for i in spec.institutions]  # main-chain nodes
    for p in spec.patients:
        owners.extend([p.institution] * p.validators)  # hosted chain nodes
    owners.extend(i.id for i in want_stores)
    owners.extend(i.id for i in want_gateways)
    ports = iter(_assign_ports(spec, owners))

    inst_identities = tuple(creds[i.id].identity for i in spec.institutions)
    main_spec = ChainSpec(
        chain_id=MAIN_CHAIN_ID,
        subject=MAIN_SUBJECT,
        validators=inst_identities,
        writers=inst_identities,
    )
    main_nodes = []
    main_endpoints = {}
    for inst in spec.institutions:
        main_endpoints[inst.id] = f"{spec.host}:{next(ports)}"
    for inst in spec.institutions:
        host, port = main_endpoints[inst.id].rsplit(":", 1)
        main_nodes.append(
            NodeConfig(
                node_id=inst.id,
                host=host,
                port=int(port),
                data_dir=os.path.join(root, inst.id, "main"),
                private_key=creds[inst.id].private_key,
                leader=spec.leader,
                peers={k: v for k, v in main_endpoints.items() if k != inst.id},
                chain=main_spec,
            )
        )

    plan = TopologyPlan(spec=spec, root=root, credentials=creds, main_nodes=main_nodes)

    for p in spec.patients:
        chain_id = patient_chain_id(p.id)
        validator_ids = [f"{chain_id}-v{i}" for i in range(1, p.validators + 1)]
        writer_ids = list(p.writers) or [i.id for i in spec.institutions]
        chain_spec = ChainSpec(
            chain_id=chain_id,
            subject=p.id,
            validators=tuple(creds[v].identity for v in validator_ids),
            writers=tuple(creds[w].identity for w in writer_ids),
        )
        endpoints = {vid: f"{spec.host}:{next(ports)}" for vid in validator_ids}
        plan.patient_nodes[p.id] = [
            NodeConfig(
                node_id=vid,
                host=spec.host,
                port=int(endpoints[vid].rsplit(":", 1)[1]),
                data_dir=os.path.join(root, p.institution, f"{chain_id}-{vid.rsplit('-', 1)[1]}"),
                private_key=creds[vid].private_key,
                leader=validator_ids[0],
                peers={k: v for k, v in endpoints.items() if k != vid},
                chain=chain_spec,
            )
            for vid in validator_ids
        ]

    for inst in want_stores:
        plan.stores[inst.id] = StoreConfig(
            store_id=f"{inst.id}-store",
            host=spec.host,
            port=next(ports),
            data_dir=os.path.join(root, inst.id, "store"),
        )

    for inst in want_gateways:
        tokens = inst.tokens or (secrets.token_hex(16),)
        plan.gateways[inst.id] = GatewayConfig(
            gateway_id=f"{inst.id}-gateway",
            host=spec.host,
            port=next(ports),
            api_tokens=tuple(tokens),
            connector=plan.connector_config(inst.id),
        )

    _write_configs(plan)
    return plan


def _config_path(root: str, kind: str, service_id: str) -> str:
    return os.path.join(root, "configs", f"{kind}-{service_id}.json")


def _write_configs(plan: TopologyPlan) -> None:
    def _dump(kind: str, service_id: str, doc: dict) -> None:
        with open(_config_path(plan.root, kind, service_id), "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    for cfg in plan.main_nodes:
        _dump("node", cfg.node_id, cfg.to_doc())
    for nodes in plan.patient_nodes.values():
        for cfg in nodes:
            _dump("node", cfg.node_id, cfg.to_doc())
    for cfg in plan.stores.values():
        _dump("store", cfg.store_id, cfg.to_doc())
    for cfg in plan.gateways.values():
        _dump("gateway", cfg.gateway_id, cfg.to_doc())


def seed_routes(plan: TopologyPlan) -> None:
    """Make the routing chain match the plan for every patient ledger.

    First bring-up registers each ledger. Bringing a plan back up over
    existing data directories re-resolves each route and, if the ledger now
    answers on different ports, repoints the route instead of leaving it
    stale.
    """
    for p in plan.spec.patients:
        connector = plan.connector(p.institution)
        chain_id = patient_chain_id(p.id)
        endpoints = plan.patient_endpoints(p.id)
        try:
            connector.register_patient(p.id, chain_id, endpoints)
            continue
        except AlreadyRegistered:
            pass
        current = connector.locate(p.id)
        if list(current.endpoints) == list(endpoints):
            log.info("route for %s already current; keeping it", p.id)
            continue
        routed_height = _ledger_height(current.endpoints, chain_id)
        planned_height = _ledger_height(endpoints, chain_id)
        if routed_height > planned_height:
            log.warning(
                "route for %s stays at %s (height %d): planned ledger at %s "
                "only reaches height %d",
                p.id, ",".join(current.endpoints), routed_height,
                ",".join(endpoints), planned_height,
            )
            continue
        log.info(
            "route for %s points at %s; repointing to %s",
            p.id, ",".join(current.endpoints), ",".join(endpoints),
        )
        connector.relocate_patient(p.id, chain_id, endpoints)


def _ledger_height(endpoints: Sequence[str], chain_id: str) -> int:
    """Tallest reachable replica of the given chain; -1 when none answers."""
    best = -1
    for endpoint in endpoints:
        try:
            doc = httpd.request_json(
                "GET", f"{httpd.base_url(endpoint)}/height", timeout=(1.0, 2.0)
            )
        except PhtError:
            continue
        if doc.get("chain_id") == chain_id:
            best = max(best, int(doc.get("height", -1)))
    return best


def wait_healthy(endpoint: str, timeout: float = HEALTH_TIMEOUT) -> None:
    deadline = time.monotonic() + timeout
    url = f"{httpd.base_url(endpoint)}/health"
    while True:
        try:
            httpd.request_json("GET", url, timeout=(1.0, 2.0))
            return
        except PhtError as exc:
            if time.monotonic() > deadline:
                raise TransportError(f"{endpoint} not healthy after {timeout}s: {exc}")
            time.sleep(0.05)


# -- thread mode --------------------------------------------------------------


class Topology:
    """A running in-process federation; stop() tears everything down."""

    def __init__(self, plan: TopologyPlan) -> None:
        self.plan = plan
        self.nodes: dict[str, tuple[LedgerNode, httpd.ServiceHandle]] = {}
        self.stores: dict[str, tuple[EvidenceStore, httpd.ServiceHandle]] = {}
        self.gateways: dict[str, tuple[Gateway, httpd.ServiceHandle]] = {}

    @property
    def main_endpoints(self) -> list[str]:
        return self.plan.main_endpoints

    def patient_endpoints(self, patient_id: str) -> list[str]:
        return self.plan.patient_endpoints(patient_id)

    def connector(self, institution: str) -> Connector:
        return self.plan.connector(institution)

    def direct_connector(self, institution: str, patient_id: str) -> Connector:
        cfg = self.plan.connector_config(institution)
        return Connector(
            ConnectorConfig(
                institution_id=cfg.institution_id,
                credential=cfg.credential,
                mode="direct",
                chain_endpoints=tuple(self.patient_endpoints(patient_id)),
                chain_patient_id=patient_id,
                store_endpoint=cfg.store_endpoint,
            )
        )

    def gateway_endpoint(self, institution: str) -> str:
        return self.plan.gateways[institution].endpoint

    def gateway_token(self, institution: str) -> str:
        return self.plan.gateways[institution].api_tokens[0]

    def start_node(self, config: NodeConfig) -> LedgerNode:
        node, handle = run_node(config)
        self.nodes[config.node_id] = (node, handle)
        return node

    def stop_node(self, node_id: str) -> None:
        node, handle = self.nodes.pop(node_id)
        handle.stop()

    def stop(self) -> None:
        for _, handle in list(self.gateways.values()):
            handle.stop()
        for _, handle in list(self.stores.values()):
            handle.stop()
        for _, handle in list(self.nodes.values()):
            handle.stop()
        self.gateways.clear()
        self.stores.clear()
        self.nodes.clear()


def launch_threads(plan: TopologyPlan, register: bool = True) -> Topology:
    """Bring the whole plan up on daemon threads; returns the live handle."""
    topo = Topology(plan)
    try:
        for cfg in plan.main_nodes:
            topo.start_node(cfg)
        for nodes in plan.patient_nodes.values():
            for cfg in nodes:
                topo.start_node(cfg)
        for inst, cfg in plan.stores.items():
            topo.stores[inst] = run_store(cfg)
        for inst, cfg in plan.gateways.items():
            topo.gateways[inst] = run_gateway(cfg)
        if register:
            seed_routes(plan)
    except BaseException:
        topo.stop()
        raise
    return topo


# -- process mode --------------------------------------------------------------


def _spawn(kind: str, service_id: str, config_path: str, root: str) -> subprocess.Popen:
    log_path = os.path.join(root, "logs", f"{kind}-{service_id}.log")
    log_fh = open(log_path, "ab")
    proc = subprocess.Popen(
        [sys.executable, "-m", "pht.cli", f"run-{kind}", "--config", config_path],
        stdout=log_fh,
        stderr=subprocess.STDOUT,
        start_new_session=True,
    )
    log_fh.close()
    return proc


def launch_processes(plan: TopologyPlan, register: bool = True) -> dict:
    """One OS process per service; returns the state document it wrote."""
    procs: list[dict] = []

    def _up(kind: str, service_id: str, endpoint: str) -> None:
        proc = _spawn(kind, service_id, _config_path(plan.root, kind, service_id), plan.root)
        procs.append({"kind": kind, "id": service_id, "pid": proc.pid, "endpoint": endpoint})

    try:
        for cfg in plan.main_nodes:
            _up("node", cfg.node_id, cfg.endpoint)
        for nodes in plan.patient_nodes.values():
            for cfg in nodes:
                _up("node", cfg.node_id, cfg.endpoint)
        for cfg in plan.stores.values():
            _up("store", cfg.store_id, cfg.endpoint)
        for entry in procs:
            wait_healthy(entry["endpoint"])
        for cfg in plan.gateways.values():
            _up("gateway", cfg.gateway_id, cfg.endpoint)
        for entry in procs:
            if entry["kind"] == "gateway":
                wait_healthy(entry["endpoint"])
        if register:
            seed_routes(plan)
    except BaseException:
        for entry in procs:
            _terminate(entry["pid"])
        raise

    state = {
        "name": plan.spec.name,
        "root": plan.root,
        "host": plan.spec.host,
        "main": {
            "chain_id": MAIN_CHAIN_ID,
            "leader": plan.spec.leader,
            "endpoints": {cfg.node_id: cfg.endpoint for cfg in plan.main_nodes},
        },
        "institutions": {
            inst.id: {
                "store": plan.stores[inst.id].endpoint if inst.id in plan.stores else "",
                "gateway": plan.gateways[inst.id].endpoint if inst.id in plan.gateways else "",
                "tokens": list(plan.gateways[inst.id].api_tokens) if inst.id in plan.gateways else [],
            }
            for inst in plan.spec.institutions
        },
        "patients": {
            p.id: {
                "chain_id": patient_chain_id(p.id),
                "institution": p.institution,
                "validators": p.validators,
                "endpoints": {
                    cfg.node_id: cfg.endpoint for cfg in plan.patient_nodes[p.id]
                },
            }
            for p in plan.spec.patients
        },
        "processes": procs,
    }
    write_state(plan.root, state)
    return state


def state_path(root: str) -> str:
    return os.path.join(os.path.abspath(root), STATE_FILE)


def write_state(root: str, state: dict) -> None:
    with open(state_path(root), "w", encoding="utf-8") as fh:
        json.dump(state, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_state(root: str) -> dict:
    path = state_path(root)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise InvalidRequest(f"no running deployment recorded at {path}")


def _terminate(pid: int, grace: float = 5.0) -> bool:
    """SIGTERM, wait, then SIGKILL; True if the process existed."""
    try:
        os.kill(pid, signal.SIGTERM)
    except ProcessLookupError:
        return False
    deadline = time.monotonic() + grace
    while time.monotonic() < deadline:
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return True
        time.sleep(0.05)
    try:
        os.kill(pid, signal.SIGKILL)
    except ProcessLookupError:
        pass
    return True


def stop_state(root: str) -> int:
    """Stop every recorded process and drop the state file; returns count."""
    state = load_state(root)
    stopped = 0
    for entry in state.get("processes", []):
        if _terminate(entry["pid"]):
            stopped += 1
    os.unlink(state_path(root))
    return stopped
