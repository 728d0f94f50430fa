"""A single ledger node: one validator process serving one chain.

Write path (leader orders, validators countersign):

    POST /tx        submit a signed transaction; followers relay to the
                    leader, the leader builds the next block, collects
                    countersignatures over its hash via POST /propose to
                    every other validator, and once floor(2N/3)+1 distinct
                    validators (itself included) have signed, appends the
                    block and broadcasts it with the full signature set via
                    POST /commit. Responds with the committed block.
    POST /propose   validator check: does this block extend my chain and
                    carry a well-formed, properly signed transaction? If so,
                    answer with {validator, signature} over the block hash.
    POST /commit    append a quorum-committed block; a replica that is
                    behind first backfills from its peers.
    POST /sync      pull missing blocks from the given endpoints (or the
                    configured peers); body {"endpoints": [...]}, answer
                    {"height": N}. Used when a freshly started replica
                    must catch up from nodes outside its peer set, e.g.
                    while a chain changes hosts.

Read path (local, no consensus):

    GET /height             {"chain_id", "height"}
    GET /blocks?from=&to=   committed blocks with from <= height <= to
                            (defaults 0..tip, clamped); the answer carries
                            "height", the committed high-water mark, so a
                            range past the tip is a truncated result, not
                            an error
    GET /dump               full chain dump, text/plain, one block per line
    GET /health             liveness + role + height
    GET /route              whole routing view        (main chain only)
    GET /route/{patient}    one patient's route       (main chain only)
    POST /route             submit a REGISTER/RELOCATE transaction document;
                            same as /tx but refuses evidence kinds
                                                      (main chain only)

Every committed block is appended to ``<data_dir>/chain.dump`` as one dump
line; on startup the node replays and fully re-validates that file and
refuses to serve a chain that fails validation.
"""
from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

from . import httpd, routing
from .errors import (
    ChainValidationError,
    DuplicateTransaction,
    IntegrityError,
    InvalidRequest,
    KeyMaterialError,
    PermissionDenied,
    PhtError,
    QuorumUnavailable,
    TransportError,
)
from .identity import Identity, identity_from_doc, identity_to_doc, public_key_for, verify_bytes
from .ledger import (
    MAIN_SUBJECT,
    Block,
    Chain,
    CommitSignature,
    Transaction,
    _check_block,
    block_from_doc,
    block_to_doc,
    build_block,
    dump_chain,
    dump_line,
    make_genesis_block,
    parse_dump,
    quorum_size,
    sign_block_hash,
    sort_commit_signatures,
    tx_from_doc,
    tx_to_doc,
    valid_commit_signatures,
    validate_chain,
)

log = logging.getLogger(__name__)

CHAIN_FILE = "chain.dump"
RELAY_HEADER = "X-Relayed"


@dataclass(frozen=True)
class ChainSpec:
    """Deployment-time description of a chain: id, subject, memberships."""

    chain_id: str
    subject: str
    validators: tuple[Identity, ...]
    writers: tuple[Identity, ...] = ()

    def __post_init__(self):
        if not self.chain_id:
            raise InvalidRequest("chain_id must be non-empty")
        if not self.subject:
            raise InvalidRequest("chain subject must be non-empty")
        if not self.validators:
            raise InvalidRequest("chain needs at least one validator")
        ids = [v.actor_id for v in self.validators]
        if len(set(ids)) != len(ids):
            raise InvalidRequest("duplicate validator ids in chain spec")

    def new_chain(self) -> Chain:
        return Chain(
            chain_id=self.chain_id,
            validator_set=self.validators,
            writer_set=self.writers,
            blocks=(make_genesis_block(self.chain_id, self.subject),),
        )

    def to_doc(self) -> dict:
        return {
            "chain_id": self.chain_id,
            "subject": self.subject,
            "validators": [identity_to_doc(v) for v in self.validators],
            "writers": [identity_to_doc(w) for w in self.writers],
        }


def chain_spec_from_doc(doc: Mapping) -> ChainSpec:
    try:
        return ChainSpec(
            chain_id=doc["chain_id"],
            subject=doc["subject"],
            validators=tuple(identity_from_doc(v) for v in doc["validators"]),
            writers=tuple(identity_from_doc(w) for w in doc.get("writers", [])),
        )
    except (KeyError, TypeError) as exc:
        raise InvalidRequest(f"bad chain spec document: {exc}") from exc


@dataclass(frozen=True)
class NodeConfig:
    """Everything one node process needs to join its chain."""

    node_id: str
    host: str
    port: int
    data_dir: str
    private_key: bytes
    leader: str
    peers: Mapping[str, str]  # other validators: node_id -> host:port
    chain: ChainSpec

    @property
    def is_leader(self) -> bool:
        return self.node_id == self.leader

    @property
    def endpoint(self) -> str:
        return f"{self.host}:{self.port}"

    def to_doc(self) -> dict:
        return {
            "node_id": self.node_id,
            "host": self.host,
            "port": self.port,
            "data_dir": self.data_dir,
            "private_key": self.private_key.hex(),
            "leader": self.leader,
            "peers": dict(self.peers),
            "chain": self.chain.to_doc(),
        }


def node_config_from_doc(doc: Mapping) -> NodeConfig:
    try:
        return NodeConfig(
            node_id=doc["node_id"],
            host=doc["host"],
            port=doc["port"],
            data_dir=doc["data_dir"],
            private_key=bytes.fromhex(doc["private_key"]),
            leader=doc["leader"],
            peers=dict(doc.get("peers", {})),
            chain=chain_spec_from_doc(doc["chain"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidRequest(f"bad node config document: {exc}") from exc


def load_node_config(path: str) -> NodeConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return node_config_from_doc(json.load(fh))


def save_node_config(config: NodeConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_doc(), fh, indent=2, sort_keys=True)
        fh.write("\n")


class LedgerNode:
    """In-process node state + handlers; serve with :func:`run_node`."""

    def __init__(self, config: NodeConfig) -> None:
        self.config = config
        spec = config.chain
        by_id = {v.actor_id: v for v in spec.validators}
        identity = by_id.get(config.node_id)
        if identity is None:
            raise InvalidRequest(
                f"node {config.node_id!r} is not in the validator set of {spec.chain_id!r}"
            )
        if config.leader not in by_id:
            raise InvalidRequest(f"leader {config.leader!r} is not a validator")
        if public_key_for(config.private_key) != identity.public_key:
            raise KeyMaterialError(f"private key does not match identity {config.node_id!r}")
        self.identity = identity
        self.subject = spec.subject
        self._known = spec.new_chain().known_identities()
        self._validators = spec.validators
        self._quorum = quorum_size(len(spec.validators))
        self._lock = threading.RLock()  # guards _blocks/_tx_ids
        self._write_lock = threading.Lock()  # serializes the leader's commit rounds
        self._blocks: list[Block] = []
        self._tx_ids: set[str] = set()
        self._chain_path = os.path.join(config.data_dir, CHAIN_FILE)
        self._load_or_init()

    # -- state ------------------------------------------------------------

    @property
    def height(self) -> int:
        with self._lock:
            return self._blocks[-1].height

    @property
    def tip(self) -> Block:
        with self._lock:
            return self._blocks[-1]

    def blocks_snapshot(self) -> tuple[Block, ...]:
        with self._lock:
            return tuple(self._blocks)

    def read_blocks(self, start: int = 0, end: int | None = None) -> tuple[list[Block], int]:
        """Committed blocks with start <= height <= end, plus the tip height.

        A range reaching past the tip is answered with what exists — the
        returned high-water mark tells the caller how far the chain goes.
        Negative or inverted ranges are malformed.
        """
        if start < 0:
            raise InvalidRequest(f"block range start {start} is negative")
        blocks = self.blocks_snapshot()
        tip = blocks[-1].height
        if end is None:
            if start > tip:  # whole range is past the tip: empty, not an error
                return [], tip
            end = tip
        if end < start:
            raise InvalidRequest(f"block range {start}..{end} is inverted")
        return list(blocks[start : end + 1]), tip

    def chain(self) -> Chain:
        return Chain(
            chain_id=self.config.chain.chain_id,
            validator_set=self.config.chain.validators,
            writer_set=self.config.chain.writers,
            blocks=self.blocks_snapshot(),
        )

    def _load_or_init(self) -> None:
        os.makedirs(self.config.data_dir, exist_ok=True)
        if os.path.exists(self._chain_path):
            with open(self._chain_path, "r", encoding="utf-8") as fh:
                blocks = parse_dump(fh.read())
            chain = replace(self.config.chain.new_chain(), blocks=tuple(blocks))
            report = validate_chain(chain)
            if not report.ok:
                raise ChainValidationError(
                    f"refusing to serve {self._chain_path}: invalid at height "
                    f"{report.height}: {report.reason}"
                )
            genesis = make_genesis_block(self.config.chain.chain_id, self.subject)
            if blocks[0].block_hash != genesis.block_hash:
                raise ChainValidationError(
                    f"{self._chain_path} belongs to a different chain "
                    f"(genesis hash mismatch for {self.config.chain.chain_id!r})"
                )
            seen: set[str] = set()
            for block in blocks:
                if block.tx.tx_id in seen:
                    raise ChainValidationError(
                        f"refusing to serve {self._chain_path}: duplicate "
                        f"transaction at height {block.height}"
                    )
                seen.add(block.tx.tx_id)
            self._blocks = list(blocks)
            self._tx_ids = seen
        else:
            genesis = make_genesis_block(self.config.chain.chain_id, self.subject)
            self._blocks = [genesis]
            self._tx_ids = {genesis.tx.tx_id}
            with open(self._chain_path, "w", encoding="utf-8") as fh:
                fh.write(dump_line(genesis) + "\n")
                fh.flush()
                os.fsync(fh.fileno())

    def _persist(self, block: Block) -> None:
        with open(self._chain_path, "a", encoding="utf-8") as fh:
            fh.write(dump_line(block) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    # -- write path -------------------------------------------------------

    def _check_tx(self, tx: Transaction, blocks: Sequence[Block]) -> None:
        """Everything a validator must agree on before signing a block."""
        if self.subject == MAIN_SUBJECT:
            if tx.kind not in ("REGISTER", "RELOCATE"):
                raise InvalidRequest(f"kind {tx.kind} not allowed on the routing chain")
        elif tx.kind not in ("ADD", "MODIFY", "DELETE"):
            raise InvalidRequest(f"kind {tx.kind} not allowed on a patient chain")
        creator = self._known.get(tx.creator)
        if creator is None:
            raise PermissionDenied(f"creator {tx.creator!r} has no write permission here")
        if self.subject == MAIN_SUBJECT and creator.role != "institution":
            raise PermissionDenied(
                f"routing records must be signed by an institution, "
                f"not {creator.role!r} {tx.creator!r}"
            )
        try:
            signature = bytes.fromhex(tx.signature)
        except ValueError:
            raise InvalidRequest("transaction signature is not valid hex")
        from .ledger import canonical_bytes

        if not verify_bytes(creator.public_key, signature, canonical_bytes(tx)):
            raise PermissionDenied("transaction signature does not verify")
        if tx.tx_id in self._tx_ids:
            raise DuplicateTransaction(f"transaction {tx.tx_id[:12]}… is already committed")
        if self.subject == MAIN_SUBJECT:
            routing.check_routing_tx(blocks, tx)

    def _append(self, block: Block) -> None:
        """Append under lock after full re-validation; persists on success."""
        reason = _check_block(
            block,
            expected_height=len(self._blocks),
            prev_hash=self._blocks[-1].block_hash,
            subject=self.subject,
            known=self._known,
            validators=self._validators,
        )
        if reason is not None:
            raise IntegrityError(f"block {block.height} rejected: {reason}")
        if block.tx.tx_id in self._tx_ids:
            raise DuplicateTransaction(f"transaction {block.tx.tx_id[:12]}… is already committed")
        self._blocks.append(block)
        self._tx_ids.add(block.tx.tx_id)
        self._persist(block)

    def submit(self, tx: Transaction) -> Block:
        """Commit one transaction; the caller gets the committed block back."""
        if not self.config.is_leader:
            return self._forward_to_leader(tx)
        with self._write_lock:
            with self._lock:
                self._check_tx(tx, self._blocks)
                block = build_block(len(self._blocks), self._blocks[-1].block_hash, tx)
            own = CommitSignature(
                self.identity.actor_id,
                sign_block_hash(block.block_hash, self.config.private_key),
            )
            signatures = [own]
            failures: list[str] = []
            for peer_id in sorted(self.config.peers):
                sig = self._collect_countersignature(peer_id, block)
                if isinstance(sig, CommitSignature):
                    signatures.append(sig)
                else:
                    failures.append(f"{peer_id}: {sig}")
            if len(signatures) < self._quorum:
                raise QuorumUnavailable(
                    f"{len(signatures)}/{self._quorum} validators signed "
                    f"({'; '.join(failures) or 'no failures reported'})"
                )
            committed = replace(block, commit_signatures=sort_commit_signatures(signatures))
            with self._lock:
                self._append(committed)
        self._broadcast_commit(committed)
        return committed

    def _collect_countersignature(self, peer_id: str, block: Block) -> CommitSignature | str:
        """One propose round-trip; returns the signature or a failure note."""
        url = f"{httpd.base_url(self.config.peers[peer_id])}/propose"
        try:
            doc = httpd.request_json("POST", url, {"block": block_to_doc(block)})
        except PhtError as exc:
            return str(exc)
        if doc.get("validator") != peer_id:
            return "countersignature names the wrong validator"
        candidate = Block(
            height=block.height,
            prev_hash=block.prev_hash,
            tx=block.tx,
            block_hash=block.block_hash,
            commit_signatures=(CommitSignature(peer_id, doc.get("signature", "")),),
        )
        if peer_id not in valid_commit_signatures(candidate, self._validators):
            return "countersignature does not verify"
        return candidate.commit_signatures[0]

    def _broadcast_commit(self, block: Block) -> None:
        doc = {"block": block_to_doc(block)}
        for peer_id in sorted(self.config.peers):
            url = f"{httpd.base_url(self.config.peers[peer_id])}/commit"
            try:
                httpd.request_json("POST", url, doc)
            except PhtError as exc:
                # Not fatal: the replica backfills from peers on its next
                # commit or explicit sync.
                log.warning("commit broadcast to %s failed: %s", peer_id, exc)

    def _forward_to_leader(self, tx: Transaction) -> Block:
        endpoint = self.config.peers.get(self.config.leader)
        if endpoint is None:
            raise QuorumUnavailable(f"no endpoint known for leader {self.config.leader!r}")
        url = f"{httpd.base_url(endpoint)}/tx"
        try:
            doc = httpd.request_json("POST", url, {"tx": tx_to_doc(tx)}, headers={RELAY_HEADER: "1"})
        except TransportError as exc:
            raise QuorumUnavailable(f"leader {self.config.leader!r} unreachable: {exc}") from exc
        return block_from_doc(doc["block"])

    def propose(self, block: Block) -> CommitSignature:
        """Countersign a block that correctly extends the local chain."""
        with self._lock:
            if block.height != len(self._blocks):
                raise InvalidRequest(
                    f"proposed height {block.height}, next here is {len(self._blocks)}"
                )
            if block.prev_hash != self._blocks[-1].block_hash:
                raise InvalidRequest("proposed block does not link to my tip")
            self._check_tx(block.tx, self._blocks)
        return CommitSignature(
            self.identity.actor_id,
            sign_block_hash(block.block_hash, self.config.private_key),
        )

    def commit(self, block: Block) -> int:
        """Apply a quorum-committed block, backfilling if this node is behind."""
        for attempt in (0, 1):
            with self._lock:
                local = self._blocks[-1].height
                if block.height <= local:
                    existing = self._blocks[block.height]
                    if existing.block_hash == block.block_hash:
                        return local  # duplicate delivery; already applied
                    raise IntegrityError(
                        f"conflicting block at height {block.height}: "
                        f"have {existing.block_hash[:12]}…, got {block.block_hash[:12]}…"
                    )
                if block.height == local + 1:
                    self._append(block)
                    return block.height
            if attempt == 0:
                self.sync_from_peers()
        raise QuorumUnavailable(
            f"behind at height {self.height}, cannot apply block {block.height}"
        )

    # -- replica sync -------------------------------------------------------

    def sync_from_peers(self, endpoints: Sequence[str] | None = None) -> int:
        """Pull committed blocks this node is missing; returns the new height.

        Every fetched block passes the same checks as a commit; a peer that
        serves a bad block is logged and skipped, not trusted.
        """
        if endpoints is None:
            endpoints = [self.config.peers[p] for p in sorted(self.config.peers)]
        for endpoint in endpoints:
            base = httpd.base_url(endpoint)
            try:
                remote = httpd.request_json("GET", f"{base}/height")["height"]
            except PhtError as exc:
                log.debug("sync: %s unreachable: %s", endpoint, exc)
                continue
            while self.height < remote:
                start = self.height + 1
                end = min(remote, start + 499)
                try:
                    doc = httpd.request_json("GET", f"{base}/blocks?from={start}&to={end}")
                    fetched = [block_from_doc(b) for b in doc["blocks"]]
                except (PhtError, KeyError) as exc:
                    log.warning("sync: bad response from %s: %s", endpoint, exc)
                    break
                if not fetched:
                    break
                try:
                    with self._lock:
                        for block in fetched:
                            self._append(block)
                except PhtError as exc:
                    log.warning("sync: %s served an invalid block: %s", endpoint, exc)
                    break
        return self.height

    # -- HTTP surface -------------------------------------------------------

    def router(self) -> httpd.Router:
        r = httpd.Router()
        r.add("POST", "/tx", self._handle_tx)
        r.add("POST", "/propose", self._handle_propose)
        r.add("POST", "/commit", self._handle_commit)
        r.add("POST", "/sync", self._handle_sync)
        r.add("GET", "/height", self._handle_height)
        r.add("GET", "/blocks", self._handle_blocks)
        r.add("GET", "/dump", self._handle_dump)
        r.add("GET", "/health", self._handle_health)
        if self.subject == MAIN_SUBJECT:
            r.add("GET", "/route", self._handle_route_all)
            r.add("GET", "/route/{patient_id}", self._handle_route_one)
            r.add("POST", "/route", self._handle_route_submit)
        return r

    def _handle_tx(self, req: httpd.Request) -> httpd.Response:
        if not self.config.is_leader and req.headers.get(RELAY_HEADER):
            raise InvalidRequest(
                f"relayed transaction, but {self.config.node_id!r} is not the leader"
            )
        tx = tx_from_doc(req.json().get("tx") or {})
        block = self.submit(tx)
        return httpd.json_response({"block": block_to_doc(block)})

    def _handle_propose(self, req: httpd.Request) -> httpd.Response:
        block = block_from_doc(req.json().get("block") or {})
        sig = self.propose(block)
        return httpd.json_response({"validator": sig.validator, "signature": sig.signature})

    def _handle_commit(self, req: httpd.Request) -> httpd.Response:
        block = block_from_doc(req.json().get("block") or {})
        height = self.commit(block)
        return httpd.json_response({"status": "ok", "height": height})

    def _handle_sync(self, req: httpd.Request) -> httpd.Response:
        doc = req.json() if req.body else {}
        endpoints = doc.get("endpoints") or None
        if endpoints is not None and not (
            isinstance(endpoints, list) and all(isinstance(e, str) for e in endpoints)
        ):
            raise InvalidRequest("endpoints must be a list of host:port strings")
        return httpd.json_response({"height": self.sync_from_peers(endpoints)})

    def _handle_height(self, req: httpd.Request) -> httpd.Response:
        return httpd.json_response(
            {"chain_id": self.config.chain.chain_id, "height": self.height}
        )

    def _handle_blocks(self, req: httpd.Request) -> httpd.Response:
        start = req.query_int("from", 0)
        end = req.query_int("to", -1)
        blocks, tip = self.read_blocks(start, None if end < 0 else end)
        return httpd.json_response(
            {"blocks": [block_to_doc(b) for b in blocks], "height": tip}
        )

    def _handle_dump(self, req: httpd.Request) -> httpd.Response:
        body = dump_chain(self.blocks_snapshot()).encode("utf-8")
        return httpd.raw_response(body, headers={"Content-Type": "text/plain; charset=utf-8"})

    def _handle_health(self, req: httpd.Request) -> httpd.Response:
        return httpd.json_response(
            {
                "status": "ok",
                "node_id": self.config.node_id,
                "chain_id": self.config.chain.chain_id,
                "subject": self.subject,
                "role": "leader" if self.config.is_leader else "follower",
                "height": self.height,
            }
        )

    def _handle_route_all(self, req: httpd.Request) -> httpd.Response:
        view = routing.build_routing_view(self.blocks_snapshot())
        return httpd.json_response(view.to_doc())

    def _handle_route_one(self, req: httpd.Request) -> httpd.Response:
        view = routing.build_routing_view(self.blocks_snapshot())
        entry = view.resolve(req.params["patient_id"])
        return httpd.json_response(entry.to_doc())

    def _handle_route_submit(self, req: httpd.Request) -> httpd.Response:
        """Routing-flavored submit: accepts only REGISTER/RELOCATE documents."""
        tx = tx_from_doc(req.json().get("tx") or {})
        if tx.kind not in ("REGISTER", "RELOCATE"):
            raise InvalidRequest(f"/route accepts routing records, not {tx.kind}")
        block = self.submit(tx)
        return httpd.json_response({"block": block_to_doc(block)})


def run_node(config: NodeConfig) -> tuple[LedgerNode, httpd.ServiceHandle]:
    """Start a node on a daemon thread (tests, embedded topologies)."""
    node = LedgerNode(config)
    handle = httpd.serve(node.router(), config.host, config.port, f"node-{config.node_id}")
    return node, handle


def run_node_blocking(config: NodeConfig) -> None:
    """Process entry point: serve until SIGTERM."""
    node = LedgerNode(config)
    httpd.run_blocking(node.router(), config.host, config.port, f"node-{config.node_id}")


# -- client helpers ---------------------------------------------------------


def submit_tx(endpoints: Sequence[str], tx: Transaction) -> Block:
    """Submit to the first reachable node of a chain; returns the commit."""
    last: Exception | None = None
    for endpoint in endpoints:
        url = f"{httpd.base_url(endpoint)}/tx"
        try:
            doc = httpd.request_json("POST", url, {"tx": tx_to_doc(tx)})
            return block_from_doc(doc["block"])
        except TransportError as exc:
            last = exc
    raise QuorumUnavailable(f"no node of the target chain is reachable: {last}")


def fetch_height(endpoint: str) -> int:
    return httpd.request_json("GET", f"{httpd.base_url(endpoint)}/height")["height"]


def fetch_blocks(endpoints: Sequence[str], start: int = 0, end: int | None = None) -> list[Block]:
    """Read committed blocks (heights start..end inclusive) from the first
    reachable node; ``end`` defaults to the node's tip."""
    last: Exception | None = None
    for endpoint in endpoints:
        url = f"{httpd.base_url(endpoint)}/blocks?from={start}"
        if end is not None:
            url += f"&to={end}"
        try:
            doc = httpd.request_json("GET", url)
            return [block_from_doc(b) for b in doc["blocks"]]
        except TransportError as exc:
            last = exc
    raise TransportError(f"no node reachable for block fetch: {last}")


def fetch_dump(endpoint: str) -> str:
    body, _ = httpd.request_raw("GET", f"{httpd.base_url(endpoint)}/dump")
    return body.decode("utf-8")


def fetch_health(endpoint: str) -> dict:
    return httpd.request_json("GET", f"{httpd.base_url(endpoint)}/health")
