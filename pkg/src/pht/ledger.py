"""Append-only hash-chained ledger primitives.

Both the per-patient ledgers and the shared routing ledger are built from the
same pieces: a Transaction (exactly one per block), a Block linking to its
predecessor by hash, and a Chain that is valid only if every link, digest,
signature, and commit quorum checks out.

Canonical transaction encoding (version 1)
------------------------------------------
Hashing and signing need byte-determinism, so a transaction is serialized as:

    0x01                                  version byte
    field(kind)                           change kind, UTF-8
    u32(len(description))                 number of key/value pairs
    for each key in lexicographic order:
        field(key) field(value)           UTF-8 pairs
    field(creator)                        actor id, UTF-8
    u64(created_at)                       UTC epoch milliseconds

where field(b) = u32(len(b)) + b, and u32/u64 are big-endian. The signature
is not part of the encoding; ``tx_id`` is the SHA-256 of these bytes and the
creator signs the same bytes.

Block hash
----------
``block_hash = SHA-256(u64(height) + prev_hash + tx_id)`` over raw digest
bytes; the genesis block's ``prev_hash`` is 32 zero bytes.

Chain dump format
-----------------
One block per line, as compact JSON with sorted keys:

    {"block_hash": <hex>, "commit_signatures": [{"signature": <hex>,
     "validator": <id>}, ...], "height": <int>, "prev_hash": <hex>,
     "tx": {"created_at": <ms>, "creator": <id>, "description": {...},
     "kind": <KIND>, "signature": <hex>, "tx_id": <hex>}}

Commit signatures are sorted by validator id, so two replicas holding the
same committed blocks produce byte-identical dumps.
"""
from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from .errors import (
    CanonicalEncodingError,
    ChainValidationError,
    InvalidRequest,
)
from .identity import Credential, Identity, sign_bytes, verify_bytes

ENCODING_VERSION = 1

KINDS = ("ADD", "MODIFY", "DELETE", "REGISTER", "RELOCATE")
PATIENT_KINDS = ("ADD", "MODIFY", "DELETE")
ROUTING_KINDS = ("REGISTER", "RELOCATE")

DIGEST_BYTES = 32
ZERO_HASH = "00" * DIGEST_BYTES

GENESIS_CREATOR = "genesis"
MAIN_SUBJECT = "main"


def now_millis() -> int:
    return int(time.time() * 1000)


@dataclass(frozen=True)
class Transaction:
    """One signed change record; the unit stored one-per-block.

    ``description`` is a flat string-to-string document. For evidence changes
    it carries the resource reference; for routing changes it carries the
    patient id and ledger endpoint. ``tx_id`` is derived, never stored, so an
    in-memory transaction can never disagree with its own digest.
    """

    kind: str
    description: Mapping[str, str]
    creator: str
    created_at: int
    signature: str = ""

    @property
    def tx_id(self) -> str:
        return hashlib.sha256(canonical_bytes(self)).hexdigest()


@dataclass(frozen=True)
class CommitSignature:
    validator: str
    signature: str


@dataclass(frozen=True)
class Block:
    """Height-ordered, hash-linked container of exactly one transaction."""

    height: int
    prev_hash: str
    tx: Transaction
    block_hash: str
    commit_signatures: tuple[CommitSignature, ...] = ()


@dataclass(frozen=True)
class Chain:
    """A complete ledger: who validates it, who may write to it, its blocks.

    ``writer_set`` holds identities granted write permission at chain
    creation (institutions recording changes on a patient ledger they do not
    validate); their signatures must verify like any validator's.
    """

    chain_id: str
    validator_set: tuple[Identity, ...]
    writer_set: tuple[Identity, ...] = ()
    blocks: tuple[Block, ...] = ()

    def known_identities(self) -> dict[str, Identity]:
        known = {i.actor_id: i for i in self.validator_set}
        known.update({i.actor_id: i for i in self.writer_set})
        return known

    def subject(self) -> str:
        if not self.blocks:
            raise InvalidRequest("chain has no genesis block")
        return self.blocks[0].tx.description.get("subject", "")


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of a whole-chain scan: ok, or the lowest bad height and why."""

    ok: bool
    height: int | None = None
    reason: str | None = None


def _field(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


def _utf8(value: object, what: str) -> bytes:
    if not isinstance(value, str):
        raise CanonicalEncodingError(f"{what} must be a string, got {type(value).__name__}")
    return value.encode("utf-8")


def canonical_bytes(tx: Transaction) -> bytes:
    """Deterministic byte form of a transaction, independent of key order.

    The signature field is excluded: these are the bytes that get hashed
    into ``tx_id`` and signed by the creator.
    """
    if tx.kind not in KINDS:
        raise CanonicalEncodingError(f"unknown transaction kind {tx.kind!r}")
    if not isinstance(tx.created_at, int) or tx.created_at < 0:
        raise CanonicalEncodingError("created_at must be a non-negative millisecond count")
    out = bytearray()
    out.append(ENCODING_VERSION)
    out += _field(_utf8(tx.kind, "kind"))
    try:
        items = sorted(tx.description.items())
    except AttributeError as exc:
        raise CanonicalEncodingError("description must be a key-value mapping") from exc
    out += struct.pack(">I", len(items))
    for key, value in items:
        out += _field(_utf8(key, "description key"))
        out += _field(_utf8(value, f"description[{key!r}]"))
    out += _field(_utf8(tx.creator, "creator"))
    out += struct.pack(">Q", tx.created_at)
    return bytes(out)


def compute_block_hash(height: int, prev_hash: str, tx_id: str) -> str:
    """SHA-256 digest of the block header fields."""
    prev = bytes.fromhex(prev_hash)
    txd = bytes.fromhex(tx_id)
    if len(prev) != DIGEST_BYTES or len(txd) != DIGEST_BYTES:
        raise InvalidRequest("prev_hash and tx_id must be 32-byte digests")
    return hashlib.sha256(struct.pack(">Q", height) + prev + txd).hexdigest()


def make_transaction(
    kind: str,
    description: Mapping[str, str],
    creator: str,
    created_at: int | None = None,
) -> Transaction:
    """Build an unsigned transaction, vetting the fields eagerly."""
    tx = Transaction(
        kind=kind,
        description=dict(description),
        creator=creator,
        created_at=now_millis() if created_at is None else created_at,
    )
    canonical_bytes(tx)  # raises on anything unserializable
    return tx


def sign_transaction(tx: Transaction, private_key: bytes) -> Transaction:
    """Attach the creator's signature over the canonical bytes."""
    return replace(tx, signature=sign_bytes(private_key, canonical_bytes(tx)).hex())


def verify_transaction(tx: Transaction, public_key: bytes) -> bool:
    """True iff the signature verifies over the transaction's canonical bytes."""
    try:
        signature = bytes.fromhex(tx.signature)
    except ValueError:
        return False
    return verify_bytes(public_key, signature, canonical_bytes(tx))


def build_block(height: int, prev_hash: str, tx: Transaction) -> Block:
    """Assemble an uncommitted block with its header hash computed."""
    return Block(
        height=height,
        prev_hash=prev_hash,
        tx=tx,
        block_hash=compute_block_hash(height, prev_hash, tx.tx_id),
    )


def sign_block_hash(block_hash: str, private_key: bytes) -> str:
    return sign_bytes(private_key, bytes.fromhex(block_hash)).hex()


def sort_commit_signatures(
    signatures: Iterable[CommitSignature],
) -> tuple[CommitSignature, ...]:
    return tuple(sorted(signatures, key=lambda s: s.validator))


def make_genesis_block(chain_id: str, subject: str) -> Block:
    """Deterministic anchor block every replica of a chain derives identically.

    Unsigned and quorum-exempt: it exists before any validator has signed
    anything, and all of its content comes from the deployment config.
    """
    tx = Transaction(
        kind="REGISTER",
        description={"chain_id": chain_id, "subject": subject},
        creator=GENESIS_CREATOR,
        created_at=0,
    )
    return build_block(0, ZERO_HASH, tx)


def quorum_size(validator_count: int) -> int:
    """Commit threshold: floor(2N/3) + 1 distinct validators (N=1 -> 1)."""
    return (2 * validator_count) // 3 + 1


def valid_commit_signatures(block: Block, validators: Sequence[Identity]) -> set[str]:
    """Validator ids whose commit signature over this block's hash verifies."""
    by_id = {v.actor_id: v for v in validators}
    digest = bytes.fromhex(block.block_hash)
    good: set[str] = set()
    for sig in block.commit_signatures:
        ident = by_id.get(sig.validator)
        if ident is None:
            continue
        try:
            raw = bytes.fromhex(sig.signature)
        except ValueError:
            continue
        if verify_bytes(ident.public_key, raw, digest):
            good.add(sig.validator)
    return good


def _check_block(
    block: Block,
    *,
    expected_height: int,
    prev_hash: str,
    subject: str,
    known: Mapping[str, Identity],
    validators: Sequence[Identity],
) -> str | None:
    """One committed block's invariants; returns a violation reason or None."""
    if block.height != expected_height:
        return f"height {block.height} where {expected_height} expected"
    if block.prev_hash != prev_hash:
        return "prev_hash does not match previous block hash"
    try:
        recomputed = compute_block_hash(block.height, block.prev_hash, block.tx.tx_id)
    except (InvalidRequest, CanonicalEncodingError) as exc:
        return f"unhashable block: {exc}"
    if recomputed != block.block_hash:
        return "block hash mismatch"
    if block.height == 0:
        if block.tx.kind != "REGISTER":
            return "genesis transaction must be REGISTER"
        return None
    if subject == MAIN_SUBJECT:
        if block.tx.kind not in ROUTING_KINDS:
            return f"kind {block.tx.kind} not allowed on the routing chain"
    else:
        if block.tx.kind not in PATIENT_KINDS:
            return f"kind {block.tx.kind} not allowed on a patient chain"
    creator = known.get(block.tx.creator)
    if creator is None:
        return f"creator {block.tx.creator!r} is not a known identity"
    if not verify_transaction(block.tx, creator.public_key):
        return "transaction signature does not verify"
    if len(valid_commit_signatures(block, validators)) < quorum_size(len(validators)):
        return "commit signatures below quorum"
    return None


def validate_chain(chain: Chain) -> ValidationReport:
    """Scan the whole chain; report ok or the lowest violating height.

    Reports, never raises: a tampered chain is an answer, not an exception.
    """
    if not chain.validator_set:
        return ValidationReport(False, None, "validator set is empty")
    if not chain.blocks:
        return ValidationReport(False, None, "chain has no genesis block")
    genesis = chain.blocks[0]
    subject = genesis.tx.description.get("subject", "")
    if not subject:
        return ValidationReport(False, 0, "genesis names no subject")
    known = chain.known_identities()
    prev_hash = ZERO_HASH
    for height, block in enumerate(chain.blocks):
        reason = _check_block(
            block,
            expected_height=height,
            prev_hash=prev_hash,
            subject=subject,
            known=known,
            validators=chain.validator_set,
        )
        if reason is not None:
            return ValidationReport(False, height, reason)
        prev_hash = block.block_hash
    return ValidationReport(True)


def tx_to_doc(tx: Transaction) -> dict:
    return {
        "tx_id": tx.tx_id,
        "kind": tx.kind,
        "description": dict(tx.description),
        "creator": tx.creator,
        "created_at": tx.created_at,
        "signature": tx.signature,
    }


def tx_from_doc(doc: Mapping) -> Transaction:
    """Parse a transaction document, rejecting any whose stated id is stale."""
    try:
        description = doc["description"]
        if not isinstance(description, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in description.items()
        ):
            raise InvalidRequest("description must map strings to strings")
        tx = Transaction(
            kind=doc["kind"],
            description=dict(description),
            creator=doc["creator"],
            created_at=doc["created_at"],
            signature=doc.get("signature", ""),
        )
    except (KeyError, TypeError) as exc:
        raise InvalidRequest(f"bad transaction document: {exc}") from exc
    canonical_bytes(tx)
    stated = doc.get("tx_id")
    if stated is not None and stated != tx.tx_id:
        raise InvalidRequest("tx_id does not match the transaction's canonical bytes")
    return tx


def block_to_doc(block: Block) -> dict:
    return {
        "height": block.height,
        "prev_hash": block.prev_hash,
        "tx": tx_to_doc(block.tx),
        "block_hash": block.block_hash,
        "commit_signatures": [
            {"validator": s.validator, "signature": s.signature}
            for s in sort_commit_signatures(block.commit_signatures)
        ],
    }


def block_from_doc(doc: Mapping) -> Block:
    """Parse a block document, rejecting stale header hashes outright."""
    try:
        tx = tx_from_doc(doc["tx"])
        block = Block(
            height=doc["height"],
            prev_hash=doc["prev_hash"],
            tx=tx,
            block_hash=doc["block_hash"],
            commit_signatures=tuple(
                CommitSignature(validator=s["validator"], signature=s["signature"])
                for s in doc.get("commit_signatures", [])
            ),
        )
    except (KeyError, TypeError) as exc:
        raise InvalidRequest(f"bad block document: {exc}") from exc
    if not isinstance(block.height, int) or block.height < 0:
        raise InvalidRequest("block height must be a non-negative integer")
    if compute_block_hash(block.height, block.prev_hash, tx.tx_id) != block.block_hash:
        raise InvalidRequest("block_hash does not match the block header")
    return block


def dump_line(block: Block) -> str:
    return json.dumps(block_to_doc(block), sort_keys=True, separators=(",", ":"))


def dump_chain(blocks: Iterable[Block]) -> str:
    """Portable text dump: one block per line, byte-stable across replicas."""
    return "".join(dump_line(b) + "\n" for b in blocks)


def parse_dump(text: str) -> list[Block]:
    blocks = []
    for lineno, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ChainValidationError(f"dump line {lineno}: not valid JSON: {exc}") from exc
        try:
            blocks.append(block_from_doc(doc))
        except InvalidRequest as exc:
            raise ChainValidationError(f"dump line {lineno}: {exc}") from exc
    return blocks


class ChainBuilder:
    """Builds committed chains through the normal append path.

    This is the reference way to construct a valid chain: every appended
    transaction is signed by its creator and the block is countersigned by
    every validator, so the result always passes ``validate_chain``.
    """

    def __init__(
        self,
        chain_id: str,
        subject: str,
        validator_credentials: Sequence[Credential],
        writer_identities: Sequence[Identity] = (),
    ) -> None:
        if not validator_credentials:
            raise InvalidRequest("at least one validator credential required")
        self._creds = tuple(validator_credentials)
        self._writers = tuple(writer_identities)
        self._blocks: list[Block] = [make_genesis_block(chain_id, subject)]
        self._chain_id = chain_id

    @property
    def height(self) -> int:
        return len(self._blocks) - 1

    def append(self, tx: Transaction) -> Block:
        prev = self._blocks[-1]
        block = build_block(prev.height + 1, prev.block_hash, tx)
        sigs = [
            CommitSignature(c.actor_id, sign_block_hash(block.block_hash, c.private_key))
            for c in self._creds
        ]
        committed = replace(block, commit_signatures=sort_commit_signatures(sigs))
        self._blocks.append(committed)
        return committed

    def chain(self) -> Chain:
        return Chain(
            chain_id=self._chain_id,
            validator_set=tuple(c.identity for c in self._creds),
            writer_set=self._writers,
            blocks=tuple(self._blocks),
        )
