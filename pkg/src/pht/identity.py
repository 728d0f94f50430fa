"""Actor identities and Ed25519 key handling.

Every actor in a deployment (an institution, a patient, or a service) is an
Identity: a unique id, a role, and a 32-byte Ed25519 verification key. The
paired private key stays with the actor; ledger structures only ever carry
public keys. A Credential bundles an identity with its private key for the
actors operated by this process.
"""
from __future__ import annotations

import json
import secrets
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .errors import InvalidRequest, KeyMaterialError

ROLES = ("institution", "patient", "service")

KEY_BYTES = 32
SIGNATURE_BYTES = 64


@dataclass(frozen=True)
class Identity:
    """A permissioned actor: who may hold nodes, sign changes, or serve data."""

    actor_id: str
    role: str
    public_key: bytes

    def __post_init__(self) -> None:
        if not self.actor_id:
            raise InvalidRequest("actor_id must be non-empty")
        if self.role not in ROLES:
            raise InvalidRequest(f"unknown role {self.role!r}")
        if len(self.public_key) != KEY_BYTES:
            raise KeyMaterialError("public key must be 32 raw Ed25519 bytes")


def _private(private_key: bytes) -> Ed25519PrivateKey:
    if len(private_key) != KEY_BYTES:
        raise KeyMaterialError("private key must be 32 raw Ed25519 seed bytes")
    try:
        return Ed25519PrivateKey.from_private_bytes(private_key)
    except Exception as exc:  # cryptography raises ValueError subtypes
        raise KeyMaterialError(f"unusable private key: {exc}") from exc


def public_key_for(private_key: bytes) -> bytes:
    """Derive the raw verification key paired with a private seed."""
    return _private(private_key).public_key().public_bytes_raw()


def sign_bytes(private_key: bytes, message: bytes) -> bytes:
    """Sign a message, returning the 64-byte Ed25519 signature."""
    return _private(private_key).sign(message)


def verify_bytes(public_key: bytes, signature: bytes, message: bytes) -> bool:
    """True iff the signature was produced over the message by the paired key."""
    if len(signature) != SIGNATURE_BYTES:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


@dataclass(frozen=True)
class Credential:
    """An identity together with its private key."""

    identity: Identity
    private_key: bytes

    def __post_init__(self) -> None:
        if public_key_for(self.private_key) != self.identity.public_key:
            raise KeyMaterialError(
                f"private key does not pair with identity {self.identity.actor_id!r}"
            )

    @property
    def actor_id(self) -> str:
        return self.identity.actor_id

    def sign(self, message: bytes) -> bytes:
        return sign_bytes(self.private_key, message)


def generate_credential(actor_id: str, role: str) -> Credential:
    """Mint a fresh identity with a random Ed25519 keypair."""
    seed = secrets.token_bytes(KEY_BYTES)
    return Credential(
        identity=Identity(actor_id=actor_id, role=role, public_key=public_key_for(seed)),
        private_key=seed,
    )


def identity_to_doc(identity: Identity) -> dict:
    return {
        "actor_id": identity.actor_id,
        "role": identity.role,
        "public_key": identity.public_key.hex(),
    }


def identity_from_doc(doc: dict) -> Identity:
    try:
        return Identity(
            actor_id=doc["actor_id"],
            role=doc["role"],
            public_key=bytes.fromhex(doc["public_key"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidRequest(f"bad identity document: {exc}") from exc


def credential_to_doc(credential: Credential) -> dict:
    doc = identity_to_doc(credential.identity)
    doc["private_key"] = credential.private_key.hex()
    return doc


def credential_from_doc(doc: dict) -> Credential:
    try:
        private_key = bytes.fromhex(doc["private_key"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidRequest(f"bad credential document: {exc}") from exc
    return Credential(identity=identity_from_doc(doc), private_key=private_key)


def save_credential(credential: Credential, path: Path) -> None:
    """Write a credential file; private key included, keep it out of shared dirs."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(credential_to_doc(credential), indent=2) + "\n")


def load_credential(path: Path) -> Credential:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidRequest(f"cannot read credential file {path}: {exc}") from exc
    return credential_from_doc(doc)
