"""Institution-side client for the ledger federation.

A connector bundles an institution's signing credential with enough
topology knowledge to work a patient's record end to end: locate the
patient's ledger, park payloads in an evidence store, commit signed
change records, and rebuild the trajectory other institutions wrote.

Two resolution modes:

    via_main   every operation resolves the patient's ledger through the
               shared routing chain first (the cross-institution path)
    direct     the connector is pinned to one patient ledger it already
               knows (an institution working its own ward); asking it
               about any other patient is a mode mismatch, not a lookup

Evidence change records are flat string maps on the patient ledger:

    ref_url       absolute URL of the payload in an evidence store
    access_key    bearer key that unlocks the payload
    content_hash  sha256 of the payload, checked on every fetch
    media_hint    what the payload is (free-form MIME-ish tag)
    note          optional human annotation
    supersedes    tx_id of the record a MODIFY replaces or DELETE retracts

DELETE records carry only ``supersedes`` (and optionally ``note``): the
retraction itself is on-ledger history, payloads are never unwritten.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

from . import node as node_client
from .errors import InvalidRequest, ModeMismatch, NotFound
from .identity import Credential, credential_from_doc, credential_to_doc
from .ledger import Block, Transaction, make_transaction, sign_transaction
from .resources import (
    DEFAULT_MEDIA_HINT,
    ResourceRef,
    fetch_evidence as fetch_stored_evidence,
    save_evidence,
)
from .routing import RoutingEntry, make_register_tx, make_relocate_tx, resolve_route

log = logging.getLogger(__name__)

MODES = ("via_main", "direct")

REFERENCE_FIELDS = ("ref_url", "access_key", "content_hash", "media_hint")


@dataclass(frozen=True)
class ConnectorConfig:
    """One institution's view of the federation."""

    institution_id: str
    credential: Credential
    mode: str = "via_main"
    main_endpoints: tuple[str, ...] = ()
    chain_endpoints: tuple[str, ...] = ()  # direct mode: the pinned ledger
    chain_patient_id: str = ""  # direct mode: whose ledger that is
    store_endpoint: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidRequest(f"unknown connector mode {self.mode!r}")
        if self.credential.actor_id != self.institution_id:
            raise InvalidRequest("connector credential must belong to the institution")
        if self.mode == "via_main" and not self.main_endpoints:
            raise InvalidRequest("via_main mode needs at least one main-chain endpoint")
        if self.mode == "direct" and not self.chain_endpoints:
            raise InvalidRequest("direct mode needs the patient ledger's endpoints")

    def to_doc(self) -> dict:
        return {
            "institution_id": self.institution_id,
            "credential": credential_to_doc(self.credential),
            "mode": self.mode,
            "main_endpoints": list(self.main_endpoints),
            "chain_endpoints": list(self.chain_endpoints),
            "chain_patient_id": self.chain_patient_id,
            "store_endpoint": self.store_endpoint,
        }


def connector_config_from_doc(doc: Mapping) -> ConnectorConfig:
    try:
        return ConnectorConfig(
            institution_id=doc["institution_id"],
            credential=credential_from_doc(doc["credential"]),
            mode=doc.get("mode", "via_main"),
            main_endpoints=tuple(doc.get("main_endpoints", [])),
            chain_endpoints=tuple(doc.get("chain_endpoints", [])),
            chain_patient_id=doc.get("chain_patient_id", ""),
            store_endpoint=doc.get("store_endpoint", ""),
        )
    except (KeyError, TypeError) as exc:
        raise InvalidRequest(f"bad connector config document: {exc}") from exc


@dataclass(frozen=True)
class TrajectoryEntry:
    """One committed change record, flattened for reading code."""

    height: int
    tx_id: str
    kind: str
    creator: str
    created_at: int
    ref_url: str = ""
    access_key: str = ""
    content_hash: str = ""
    media_hint: str = ""
    note: str = ""
    supersedes: str = ""

    def ref(self) -> ResourceRef:
        if not self.ref_url:
            raise NotFound(f"record {self.tx_id[:12]}… carries no payload reference")
        return ResourceRef(
            url=self.ref_url,
            access_key=self.access_key,
            content_hash=self.content_hash,
            media_hint=self.media_hint or DEFAULT_MEDIA_HINT,
        )

    def to_doc(self) -> dict:
        return {
            "height": self.height,
            "tx_id": self.tx_id,
            "kind": self.kind,
            "creator": self.creator,
            "created_at": self.created_at,
            "ref_url": self.ref_url,
            "access_key": self.access_key,
            "content_hash": self.content_hash,
            "media_hint": self.media_hint,
            "note": self.note,
            "supersedes": self.supersedes,
        }


def trajectory_entry_from_doc(doc: Mapping) -> TrajectoryEntry:
    try:
        return TrajectoryEntry(
            height=doc["height"],
            tx_id=doc["tx_id"],
            kind=doc["kind"],
            creator=doc["creator"],
            created_at=doc["created_at"],
            ref_url=doc.get("ref_url", ""),
            access_key=doc.get("access_key", ""),
            content_hash=doc.get("content_hash", ""),
            media_hint=doc.get("media_hint", ""),
            note=doc.get("note", ""),
            supersedes=doc.get("supersedes", ""),
        )
    except (KeyError, TypeError) as exc:
        raise InvalidRequest(f"bad trajectory entry document: {exc}") from exc


def entry_from_block(block: Block) -> TrajectoryEntry:
    desc = block.tx.description
    return TrajectoryEntry(
        height=block.height,
        tx_id=block.tx.tx_id,
        kind=block.tx.kind,
        creator=block.tx.creator,
        created_at=block.tx.created_at,
        ref_url=desc.get("ref_url", ""),
        access_key=desc.get("access_key", ""),
        content_hash=desc.get("content_hash", ""),
        media_hint=desc.get("media_hint", ""),
        note=desc.get("note", ""),
        supersedes=desc.get("supersedes", ""),
    )


def materialize_current_view(entries: Sequence[TrajectoryEntry]) -> list[TrajectoryEntry]:
    """Replay change records into the record set currently in force.

    ADD appends; MODIFY replaces its target in place (the slot keeps its
    position, the entry is the modifying record); DELETE removes its target.
    An entry whose ``supersedes`` points at no live record — superseded
    twice, retracted already, or never committed — is logged as a dangling
    reference and retained in the view unaltered, so no committed change is
    silently discarded.
    """
    view: list[TrajectoryEntry] = []
    index: dict[str, int] = {}  # live tx_id -> slot in view

    def _slot(entry: TrajectoryEntry) -> int | None:
        slot = index.get(entry.supersedes)
        if slot is None:
            log.warning(
                "%s at height %d supersedes unknown record %s… — dangling reference, entry retained",
                entry.kind,
                entry.height,
                entry.supersedes[:12],
            )
        return slot

    def _append(entry: TrajectoryEntry) -> None:
        index[entry.tx_id] = len(view)
        view.append(entry)

    for entry in entries:
        if entry.kind == "ADD":
            _append(entry)
        elif entry.kind == "MODIFY":
            slot = _slot(entry)
            if slot is None:
                _append(entry)
            else:
                del index[entry.supersedes]
                index[entry.tx_id] = slot
                view[slot] = entry
        elif entry.kind == "DELETE":
            slot = _slot(entry)
            if slot is None:
                _append(entry)
            else:
                del index[entry.supersedes]
                view.pop(slot)
                for tx_id, pos in index.items():
                    if pos > slot:
                        index[tx_id] = pos - 1
    return view


class Connector:
    """Everything an institution's systems do against the federation."""

    def __init__(self, config: ConnectorConfig) -> None:
        self.config = config

    # -- resolution ---------------------------------------------------------

    def locate(self, patient_id: str) -> RoutingEntry:
        """Where does this patient's ledger live right now?"""
        if self.config.mode == "direct":
            self._check_direct_patient(patient_id)
            return RoutingEntry(
                patient_id=self.config.chain_patient_id or patient_id,
                chain_id="",
                endpoints=self.config.chain_endpoints,
                institution=self.config.institution_id,
                height=-1,  # pinned by config, not by a routing record
                tx_id="",
            )
        if not patient_id:
            raise InvalidRequest("patient_id is required in via_main mode")
        return resolve_route(self.config.main_endpoints, patient_id)

    def _check_direct_patient(self, patient_id: str) -> None:
        pinned = self.config.chain_patient_id
        if patient_id and pinned and patient_id != pinned:
            raise ModeMismatch(
                f"connector is pinned to {pinned!r}, asked about {patient_id!r}"
            )

    def _chain_endpoints(self, patient_id: str) -> tuple[str, ...]:
        return tuple(self.locate(patient_id).endpoints)

    # -- routing writes (via_main only) --------------------------------------

    def _main_or_mismatch(self) -> tuple[str, ...]:
        if self.config.mode != "via_main":
            raise ModeMismatch("routing records require a via_main connector")
        return self.config.main_endpoints

    def register_patient(
        self, patient_id: str, chain_id: str, chain_endpoints: Sequence[str]
    ) -> Block:
        """Announce a newly created patient ledger on the routing chain."""
        main = self._main_or_mismatch()
        tx = make_register_tx(
            patient_id, chain_id, chain_endpoints, self.config.institution_id,
            creator=self.config.institution_id,
        )
        return node_client.submit_tx(main, self._sign(tx))

    def relocate_patient(
        self, patient_id: str, chain_id: str, chain_endpoints: Sequence[str]
    ) -> Block:
        """Repoint an existing route after the ledger moved institutions."""
        main = self._main_or_mismatch()
        tx = make_relocate_tx(
            patient_id, chain_id, chain_endpoints, self.config.institution_id,
            creator=self.config.institution_id,
        )
        return node_client.submit_tx(main, self._sign(tx))

    # -- evidence writes ------------------------------------------------------

    def _sign(self, tx: Transaction) -> Transaction:
        return sign_transaction(tx, self.config.credential.private_key)

    def _store_or_error(self) -> str:
        if not self.config.store_endpoint:
            raise InvalidRequest("connector has no evidence store configured")
        return self.config.store_endpoint

    def save_payload(self, payload: bytes, media_hint: str = DEFAULT_MEDIA_HINT) -> ResourceRef:
        return save_evidence(self._store_or_error(), payload, media_hint)

    def _submit_change(
        self, patient_id: str, kind: str, description: dict[str, str]
    ) -> TrajectoryEntry:
        endpoints = self._chain_endpoints(patient_id)
        tx = self._sign(make_transaction(kind, description, self.config.institution_id))
        block = node_client.submit_tx(endpoints, tx)
        return entry_from_block(block)

    @staticmethod
    def _reference_description(
        ref: ResourceRef, note: str, supersedes: str = ""
    ) -> dict[str, str]:
        if not ref.url:
            raise InvalidRequest("resource reference names no store URL")
        desc = {
            "ref_url": ref.url,
            "access_key": ref.access_key,
            "content_hash": ref.content_hash,
            "media_hint": ref.media_hint or DEFAULT_MEDIA_HINT,
        }
        if note:
            desc["note"] = note
        if supersedes:
            desc["supersedes"] = supersedes
        return desc

    def add_reference(
        self,
        patient_id: str,
        ref: ResourceRef,
        note: str = "",
    ) -> TrajectoryEntry:
        """Commit an ADD for a payload already sitting in a store."""
        return self._submit_change(
            patient_id, "ADD", self._reference_description(ref, note)
        )

    def add_evidence(
        self,
        patient_id: str,
        payload: bytes,
        media_hint: str = DEFAULT_MEDIA_HINT,
        note: str = "",
    ) -> TrajectoryEntry:
        """Park the payload in the store, then commit the ADD record."""
        return self.add_reference(patient_id, self.save_payload(payload, media_hint), note)

    def modify_reference(
        self,
        patient_id: str,
        supersedes: str,
        ref: ResourceRef,
        note: str = "",
    ) -> TrajectoryEntry:
        """Commit a MODIFY pointing at a payload already sitting in a store."""
        if not supersedes:
            raise InvalidRequest("modify needs the tx_id it supersedes")
        return self._submit_change(
            patient_id,
            "MODIFY",
            self._reference_description(ref, note, supersedes=supersedes),
        )

    def modify_evidence(
        self,
        patient_id: str,
        supersedes: str,
        payload: bytes,
        media_hint: str = DEFAULT_MEDIA_HINT,
        note: str = "",
    ) -> TrajectoryEntry:
        """Commit a MODIFY replacing an earlier record with a new payload."""
        return self.modify_reference(
            patient_id, supersedes, self.save_payload(payload, media_hint), note
        )

    def delete_evidence(self, patient_id: str, supersedes: str, note: str = "") -> TrajectoryEntry:
        """Commit a DELETE retracting an earlier record (payload stays stored)."""
        if not supersedes:
            raise InvalidRequest("delete_evidence needs the tx_id it retracts")
        desc: dict[str, str] = {"supersedes": supersedes}
        if note:
            desc["note"] = note
        return self._submit_change(patient_id, "DELETE", desc)

    # -- reads ----------------------------------------------------------------

    def get_trajectory(self, patient_id: str) -> list[TrajectoryEntry]:
        """Every committed change record, oldest first (genesis excluded)."""
        endpoints = self._chain_endpoints(patient_id)
        blocks = node_client.fetch_blocks(endpoints, start=1)
        return [entry_from_block(b) for b in blocks]

    def current_view(self, patient_id: str) -> list[TrajectoryEntry]:
        """The record set currently in force after replaying all changes."""
        return materialize_current_view(self.get_trajectory(patient_id))

    def fetch_evidence(self, entry: TrajectoryEntry) -> tuple[bytes, str]:
        """Pull an entry's payload and media hint from its store; hash-verified."""
        return fetch_stored_evidence(entry.ref())

    def fetch_payload(self, entry: TrajectoryEntry) -> bytes:
        """Just the bytes of :meth:`fetch_evidence`."""
        return self.fetch_evidence(entry)[0]
