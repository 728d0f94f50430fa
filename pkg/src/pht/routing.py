"""Patient-to-ledger routing over the shared main chain.

The main chain records where each patient's ledger lives: REGISTER announces
a newly created patient chain, RELOCATE repoints an existing one after a
custody move. A routing view is a pure replay of those records — for every
patient, the entry written at the greatest height wins.

Routing transaction descriptions are flat string maps:

    patient_id    the patient the entry routes
    chain_id      id of the patient's ledger
    endpoints     comma-separated ``host:port`` list of that ledger's nodes
    institution   id of the institution hosting the ledger
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from . import httpd
from .errors import AlreadyRegistered, InvalidRequest, NotFound, TransportError
from .ledger import Block, Transaction, make_transaction

ROUTING_FIELDS = ("patient_id", "chain_id", "endpoints", "institution")


@dataclass(frozen=True)
class RoutingEntry:
    """Where one patient's ledger currently lives."""

    patient_id: str
    chain_id: str
    endpoints: tuple[str, ...]
    institution: str
    height: int  # main-chain height of the routing record that set this
    tx_id: str

    def to_doc(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "chain_id": self.chain_id,
            "endpoints": list(self.endpoints),
            "institution": self.institution,
            "height": self.height,
            "tx_id": self.tx_id,
        }


def entry_from_doc(doc: Mapping) -> RoutingEntry:
    try:
        return RoutingEntry(
            patient_id=doc["patient_id"],
            chain_id=doc["chain_id"],
            endpoints=tuple(doc["endpoints"]),
            institution=doc["institution"],
            height=doc["height"],
            tx_id=doc["tx_id"],
        )
    except (KeyError, TypeError) as exc:
        raise InvalidRequest(f"bad routing entry document: {exc}") from exc


@dataclass(frozen=True)
class RoutingView:
    """All current routes, as of one main-chain height."""

    height: int
    entries: Mapping[str, RoutingEntry]

    def resolve(self, patient_id: str) -> RoutingEntry:
        entry = self.entries.get(patient_id)
        if entry is None:
            raise NotFound(f"no ledger routed for patient {patient_id!r}")
        return entry

    def to_doc(self) -> dict:
        return {
            "height": self.height,
            "entries": [self.entries[pid].to_doc() for pid in sorted(self.entries)],
        }


def split_endpoints(joined: str) -> tuple[str, ...]:
    return tuple(e.strip() for e in joined.split(",") if e.strip())


def _entry_from_block(block: Block) -> RoutingEntry | None:
    desc = block.tx.description
    if any(not desc.get(f) for f in ROUTING_FIELDS):
        return None
    return RoutingEntry(
        patient_id=desc["patient_id"],
        chain_id=desc["chain_id"],
        endpoints=split_endpoints(desc["endpoints"]),
        institution=desc["institution"],
        height=block.height,
        tx_id=block.tx.tx_id,
    )


def build_routing_view(blocks: Sequence[Block]) -> RoutingView:
    """Replay routing records; for each patient the latest height wins."""
    entries: dict[str, RoutingEntry] = {}
    for block in blocks:
        if block.height == 0 or block.tx.kind not in ("REGISTER", "RELOCATE"):
            continue
        entry = _entry_from_block(block)
        if entry is not None:
            entries[entry.patient_id] = entry
    height = blocks[-1].height if blocks else 0
    return RoutingView(height=height, entries=entries)


def check_routing_tx(blocks: Sequence[Block], tx: Transaction) -> None:
    """Write-time rules the main chain enforces before accepting a record.

    REGISTER must introduce a patient no existing record routes; RELOCATE
    must repoint one that is already routed.
    """
    desc = tx.description
    missing = [f for f in ROUTING_FIELDS if not desc.get(f)]
    if missing:
        raise InvalidRequest(f"routing record missing fields: {', '.join(missing)}")
    if not split_endpoints(desc["endpoints"]):
        raise InvalidRequest("routing record lists no endpoints")
    view = build_routing_view(blocks)
    patient_id = desc["patient_id"]
    if tx.kind == "REGISTER" and patient_id in view.entries:
        raise AlreadyRegistered(f"patient {patient_id!r} already has a routed ledger")
    if tx.kind == "RELOCATE" and patient_id not in view.entries:
        raise NotFound(f"cannot relocate unrouted patient {patient_id!r}")


def make_register_tx(
    patient_id: str,
    chain_id: str,
    endpoints: Iterable[str],
    institution: str,
    creator: str,
    created_at: int | None = None,
) -> Transaction:
    return make_transaction(
        "REGISTER",
        {
            "patient_id": patient_id,
            "chain_id": chain_id,
            "endpoints": ",".join(endpoints),
            "institution": institution,
        },
        creator,
        created_at,
    )


def make_relocate_tx(
    patient_id: str,
    chain_id: str,
    endpoints: Iterable[str],
    institution: str,
    creator: str,
    created_at: int | None = None,
) -> Transaction:
    return make_transaction(
        "RELOCATE",
        {
            "patient_id": patient_id,
            "chain_id": chain_id,
            "endpoints": ",".join(endpoints),
            "institution": institution,
        },
        creator,
        created_at,
    )


def resolve_route(main_endpoints: Sequence[str], patient_id: str) -> RoutingEntry:
    """Ask any reachable main-chain node where a patient's ledger lives.

    Reads are local to whichever node answers first; NotFound is an answer,
    only transport failures fall through to the next endpoint.
    """
    last_error: Exception | None = None
    for endpoint in main_endpoints:
        url = f"{httpd.base_url(endpoint)}/route/{patient_id}"
        try:
            return entry_from_doc(httpd.request_json("GET", url))
        except TransportError as exc:
            last_error = exc
    raise TransportError(
        f"no main-chain node reachable for route lookup: {last_error}"
    )


def fetch_routing_view(main_endpoints: Sequence[str]) -> RoutingView:
    last_error: Exception | None = None
    for endpoint in main_endpoints:
        url = f"{httpd.base_url(endpoint)}/route"
        try:
            doc = httpd.request_json("GET", url)
            return RoutingView(
                height=doc["height"],
                entries={e["patient_id"]: entry_from_doc(e) for e in doc["entries"]},
            )
        except TransportError as exc:
            last_error = exc
    raise TransportError(f"no main-chain node reachable for routing view: {last_error}")
