"""Error taxonomy shared by every service and client in the federation.

Each error carries a short machine-readable ``code`` that travels over the
wire as ``{"error": {"code": ..., "message": ...}}`` and an HTTP status used
by the service layers. Clients rebuild the matching exception from the code,
so a caller sees the same exception type whether the operation ran in-process
or across HTTP.
"""
from __future__ import annotations


class PhtError(Exception):
    """Base class for all federation errors."""

    code = "error"
    http_status = 500


class InvalidRequest(PhtError):
    """Malformed or semantically inconsistent input."""

    code = "validation"
    http_status = 422


class CanonicalEncodingError(PhtError):
    """A transaction field cannot be canonically serialized."""

    code = "encoding"
    http_status = 422


class KeyMaterialError(PhtError):
    """Malformed or mismatched signing key material."""

    code = "key"
    http_status = 400


class PermissionDenied(PhtError):
    """Signer or caller is not authorized for the operation."""

    code = "permission"
    http_status = 403


class Unauthenticated(PhtError):
    """Missing or unrecognized client credential."""

    code = "unauthenticated"
    http_status = 401


class NotFound(PhtError):
    """Referenced patient, resource, or range does not exist."""

    code = "not_found"
    http_status = 404


class AlreadyRegistered(PhtError):
    """Patient already has a registered ledger; one ledger per patient."""

    code = "already_registered"
    http_status = 409


class DuplicateTransaction(PhtError):
    """Transaction id was already committed; retries must not double-append."""

    code = "duplicate_tx"
    http_status = 409


class QuorumUnavailable(PhtError):
    """Not enough validators reachable to commit a write."""

    code = "unavailable"
    http_status = 503


class ModeMismatch(PhtError):
    """Connector mode and supplied patient id disagree."""

    code = "mode_mismatch"
    http_status = 422


class IntegrityError(PhtError):
    """Retrieved bytes do not match the recorded content hash."""

    code = "integrity"
    http_status = 502


class TransportError(PhtError):
    """A remote service could not be reached."""

    code = "transport"
    http_status = 502


class ChainValidationError(PhtError):
    """A persisted or received ledger failed validation."""

    code = "invalid_chain"
    http_status = 500


_BY_CODE = {
    cls.code: cls
    for cls in (
        InvalidRequest,
        CanonicalEncodingError,
        KeyMaterialError,
        PermissionDenied,
        Unauthenticated,
        NotFound,
        AlreadyRegistered,
        DuplicateTransaction,
        QuorumUnavailable,
        ModeMismatch,
        IntegrityError,
        TransportError,
        ChainValidationError,
    )
}


def error_from_code(code: str, message: str) -> PhtError:
    """Rebuild the exception a remote service reported."""
    return _BY_CODE.get(code, PhtError)(message)


def error_doc(exc: PhtError) -> dict:
    """Wire form of an error."""
    return {"error": {"code": exc.code, "message": str(exc)}}
