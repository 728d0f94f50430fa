"""Content-addressed evidence payload store with bearer-key access.

Evidence payloads (imaging, documents, raw records of any format) never go
on a ledger; a ledger records only a reference. The store holds the bytes
plus a free-form media hint and gates retrieval on a per-resource key:

    resource_id   sha256(content + salt), salt random per save — stable
                  name, but two saves of equal content still get distinct
                  ids and keys
    access_key    256-bit random bearer token, returned once at save time;
                  only its sha256 is kept, compared in constant time
    content_hash  sha256(content), lets any holder of a reference verify
                  the bytes they got back
    media_hint    opaque string stored verbatim and echoed on retrieval

A reference names the resource by absolute URL, so it pins down exactly
which store holds the bytes. Empty payloads are legal. Unknown id and
wrong key fail with distinct error codes; the key comparison itself is
constant-time.

HTTP surface:

    POST   /resources        raw body, optional X-Media-Hint header ->
                             {url, access_key, content_hash, media_hint,
                              resource_id, size}
    GET    /resources/{id}   Authorization: Bearer <access_key> -> raw
                             body, X-Media-Hint + X-Content-Hash headers
    DELETE /resources/{id}   Authorization: Bearer <access_key>; payload
                             becomes irrecoverable
    GET    /health           {"status": "ok", "objects": N}

Writes to the store are institution-internal: anyone who can reach the
endpoint may save (network placement is the authorization boundary), while
retrieval and deletion require the minted key.
"""
from __future__ import annotations

import hashlib
import hmac
import json
import logging
import os
import secrets
import tempfile
from dataclasses import dataclass
from typing import Mapping

from . import httpd
from .errors import IntegrityError, InvalidRequest, NotFound, PermissionDenied

log = logging.getLogger(__name__)

ACCESS_KEY_BYTES = 32
SALT_BYTES = 16
MEDIA_HINT_HEADER = "X-Media-Hint"
CONTENT_HASH_HEADER = "X-Content-Hash"
DEFAULT_MEDIA_HINT = "application/octet-stream"


def resource_url(endpoint: str, resource_id: str) -> str:
    return f"{httpd.base_url(endpoint)}/resources/{resource_id}"


@dataclass(frozen=True)
class ResourceRef:
    """Everything needed to fetch and verify one stored payload.

    The URL is absolute — it names the exact store holding the bytes, so a
    reference recorded on a ledger stays resolvable from anywhere.
    """

    url: str
    access_key: str
    content_hash: str
    media_hint: str = DEFAULT_MEDIA_HINT

    @property
    def resource_id(self) -> str:
        return self.url.rstrip("/").rsplit("/", 1)[-1]

    def to_doc(self) -> dict:
        return {
            "url": self.url,
            "access_key": self.access_key,
            "content_hash": self.content_hash,
            "media_hint": self.media_hint,
        }


def resource_ref_from_doc(doc: Mapping) -> ResourceRef:
    try:
        ref = ResourceRef(
            url=doc["url"],
            access_key=doc["access_key"],
            content_hash=doc["content_hash"],
            media_hint=doc.get("media_hint", DEFAULT_MEDIA_HINT),
        )
    except (KeyError, TypeError) as exc:
        raise InvalidRequest(f"bad resource reference document: {exc}") from exc
    if not ref.url:
        raise InvalidRequest("resource reference needs a url")
    return ref


@dataclass(frozen=True)
class StoredResource:
    """What a save mints; the access key exists nowhere else."""

    resource_id: str
    access_key: str
    content_hash: str
    media_hint: str
    size: int

    def ref(self, endpoint: str) -> ResourceRef:
        return ResourceRef(
            url=resource_url(endpoint, self.resource_id),
            access_key=self.access_key,
            content_hash=self.content_hash,
            media_hint=self.media_hint,
        )


class EvidenceStore:
    """Directory-backed payload store; one blob + one metadata file per id."""

    def __init__(self, data_dir: str) -> None:
        self._blob_dir = os.path.join(data_dir, "blobs")
        self._meta_dir = os.path.join(data_dir, "meta")
        os.makedirs(self._blob_dir, exist_ok=True)
        os.makedirs(self._meta_dir, exist_ok=True)

    def _paths(self, resource_id: str) -> tuple[str, str]:
        if not resource_id or any(c in resource_id for c in "/\\."):
            raise InvalidRequest(f"malformed resource id {resource_id!r}")
        return (
            os.path.join(self._blob_dir, resource_id),
            os.path.join(self._meta_dir, resource_id + ".json"),
        )

    def save(self, content: bytes, media_hint: str = DEFAULT_MEDIA_HINT) -> StoredResource:
        if not isinstance(content, (bytes, bytearray)):
            raise InvalidRequest("evidence payload must be bytes")
        if not isinstance(media_hint, str):
            raise InvalidRequest("media hint must be a string")
        content = bytes(content)
        salt = secrets.token_bytes(SALT_BYTES)
        resource_id = hashlib.sha256(content + salt).hexdigest()
        access_key = secrets.token_bytes(ACCESS_KEY_BYTES).hex()
        content_hash = hashlib.sha256(content).hexdigest()
        blob_path, meta_path = self._paths(resource_id)
        meta = {
            "key_hash": hashlib.sha256(bytes.fromhex(access_key)).hexdigest(),
            "content_hash": content_hash,
            "media_hint": media_hint,
            "salt": salt.hex(),
            "size": len(content),
        }
        self._write_atomic(blob_path, content)
        self._write_atomic(meta_path, json.dumps(meta, sort_keys=True).encode("utf-8"))
        return StoredResource(
            resource_id=resource_id,
            access_key=access_key,
            content_hash=content_hash,
            media_hint=media_hint,
            size=len(content),
        )

    def _authorized_meta(self, resource_id: str, access_key: str) -> tuple[str, str, dict]:
        blob_path, meta_path = self._paths(resource_id)
        try:
            with open(meta_path, "r", encoding="utf-8") as fh:
                meta = json.load(fh)
        except FileNotFoundError:
            raise NotFound(f"no resource {resource_id!r}")
        try:
            presented = hashlib.sha256(bytes.fromhex(access_key)).hexdigest()
        except ValueError:
            raise PermissionDenied("access key rejected")
        if not hmac.compare_digest(presented, meta["key_hash"]):
            raise PermissionDenied("access key rejected")
        return blob_path, meta_path, meta

    def load(self, resource_id: str, access_key: str) -> tuple[bytes, str]:
        """Payload bytes and the media hint they were stored with."""
        blob_path, _, meta = self._authorized_meta(resource_id, access_key)
        with open(blob_path, "rb") as fh:
            content = fh.read()
        if hashlib.sha256(content).hexdigest() != meta["content_hash"]:
            raise IntegrityError(f"stored payload for {resource_id!r} is corrupt")
        return content, meta.get("media_hint", DEFAULT_MEDIA_HINT)

    def delete(self, resource_id: str, access_key: str) -> None:
        """Make the payload irrecoverable; key required, like retrieval."""
        blob_path, meta_path, _ = self._authorized_meta(resource_id, access_key)
        os.unlink(meta_path)
        try:
            os.unlink(blob_path)
        except FileNotFoundError:
            pass

    def exists(self, resource_id: str) -> bool:
        _, meta_path = self._paths(resource_id)
        return os.path.exists(meta_path)

    def count(self) -> int:
        return sum(1 for name in os.listdir(self._meta_dir) if name.endswith(".json"))

    @staticmethod
    def _write_atomic(path: str, data: bytes) -> None:
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path))
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


@dataclass(frozen=True)
class StoreConfig:
    store_id: str
    host: str
    port: int
    data_dir: str

    @property
    def endpoint(self) -> str:
        return f"{self.host}:{self.port}"

    def to_doc(self) -> dict:
        return {
            "store_id": self.store_id,
            "host": self.host,
            "port": self.port,
            "data_dir": self.data_dir,
        }


def store_config_from_doc(doc: Mapping) -> StoreConfig:
    try:
        return StoreConfig(
            store_id=doc["store_id"],
            host=doc["host"],
            port=doc["port"],
            data_dir=doc["data_dir"],
        )
    except (KeyError, TypeError) as exc:
        raise InvalidRequest(f"bad store config document: {exc}") from exc


def load_store_config(path: str) -> StoreConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return store_config_from_doc(json.load(fh))


def store_router(store: EvidenceStore, store_id: str = "store", endpoint: str = "") -> httpd.Router:
    def _url_base(req: httpd.Request) -> str:
        # Prefer the address the client actually used; minted URLs must
        # point back at this store from wherever the client sits.
        host = req.headers.get("Host") or endpoint
        return httpd.base_url(host)

    def _save(req: httpd.Request) -> httpd.Response:
        hint = req.headers.get(MEDIA_HINT_HEADER) or DEFAULT_MEDIA_HINT
        stored = store.save(req.body, hint)
        return httpd.json_response(
            {
                "url": f"{_url_base(req)}/resources/{stored.resource_id}",
                "access_key": stored.access_key,
                "content_hash": stored.content_hash,
                "media_hint": stored.media_hint,
                "resource_id": stored.resource_id,
                "size": stored.size,
            },
            status=201,
        )

    def _key_or_denied(req: httpd.Request) -> str:
        key = req.bearer_token()
        if key is None:
            raise PermissionDenied("missing bearer access key")
        return key

    def _load(req: httpd.Request) -> httpd.Response:
        content, hint = store.load(req.params["resource_id"], _key_or_denied(req))
        return httpd.raw_response(
            content,
            headers={
                CONTENT_HASH_HEADER: hashlib.sha256(content).hexdigest(),
                MEDIA_HINT_HEADER: hint,
            },
        )

    def _delete(req: httpd.Request) -> httpd.Response:
        store.delete(req.params["resource_id"], _key_or_denied(req))
        return httpd.json_response({"status": "deleted"})

    def _health(req: httpd.Request) -> httpd.Response:
        return httpd.json_response({"status": "ok", "store_id": store_id, "objects": store.count()})

    r = httpd.Router()
    r.add("POST", "/resources", _save)
    r.add("GET", "/resources/{resource_id}", _load)
    r.add("DELETE", "/resources/{resource_id}", _delete)
    r.add("GET", "/health", _health)
    return r


def run_store(config: StoreConfig) -> tuple[EvidenceStore, httpd.ServiceHandle]:
    store = EvidenceStore(config.data_dir)
    router = store_router(store, config.store_id, config.endpoint)
    handle = httpd.serve(router, config.host, config.port, f"store-{config.store_id}")
    return store, handle


def run_store_blocking(config: StoreConfig) -> None:
    store = EvidenceStore(config.data_dir)
    router = store_router(store, config.store_id, config.endpoint)
    httpd.run_blocking(router, config.host, config.port, f"store-{config.store_id}")


# -- client -----------------------------------------------------------------


def save_evidence(endpoint: str, content: bytes, media_hint: str = DEFAULT_MEDIA_HINT) -> ResourceRef:
    """Upload a payload; the returned reference is the only copy of the key."""
    doc = httpd.upload_bytes(
        f"{httpd.base_url(endpoint)}/resources",
        content,
        headers={MEDIA_HINT_HEADER: media_hint},
    )
    return resource_ref_from_doc(doc)


def fetch_evidence(ref: ResourceRef) -> tuple[bytes, str]:
    """Download a payload and its media hint; tampered bytes are an error.

    The digest gate runs before anything is returned: bytes whose sha256
    differs from the reference's content_hash never reach the caller.
    """
    content, headers = httpd.request_raw(
        "GET", ref.url, headers={"Authorization": f"Bearer {ref.access_key}"}
    )
    digest = hashlib.sha256(content).hexdigest()
    if digest != ref.content_hash:
        raise IntegrityError(
            f"payload hash mismatch for {ref.url}: "
            f"expected {ref.content_hash[:12]}…, got {digest[:12]}…"
        )
    return content, headers.get(MEDIA_HINT_HEADER, ref.media_hint)


def delete_evidence(ref: ResourceRef) -> None:
    """Remove the payload behind a reference; requires the reference's key."""
    httpd.request_json(
        "DELETE", ref.url, headers={"Authorization": f"Bearer {ref.access_key}"}
    )
