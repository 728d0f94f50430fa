"""Token-guarded REST front for one institution's connector.

Practitioner-facing applications never hold ledger keys or talk wire
protocol; they call this gateway with a bearer API token and plain JSON.
Every request is delegated straight to the institution's connector — the
gateway holds no state of its own, so restarting it changes nothing.

    GET  /trajectory/{patient}          full change history
    GET  /trajectory/{patient}/current  records currently in force
    POST /references                    commit an ADD/MODIFY/DELETE record
    GET  /evidence/{height}?patient_id= payload bytes behind the record
                                        committed at that height
    GET  /health                        unauthenticated liveness

POST /references body:

    {"patient_id": ..., "kind": "ADD" | "MODIFY" | "DELETE",
     "resource": {url, access_key, content_hash, media_hint},
     "note": ..., "supersedes": ...}

``kind`` defaults to ADD; MODIFY and DELETE require ``supersedes``;
DELETE takes no resource.

API tokens are mandatory when the gateway listens on a non-loopback
interface. On loopback, an empty token list is allowed and disables the
auth check — the deployment is then only reachable from the same host.

Startup probes the connector's ledger endpoints; if none answers, the
gateway refuses to start rather than accept requests it can only fail.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Mapping

from . import httpd
from .connector import Connector, ConnectorConfig, connector_config_from_doc
from .errors import InvalidRequest, NotFound, PhtError, TransportError, Unauthenticated
from .resources import DEFAULT_MEDIA_HINT, resource_ref_from_doc

log = logging.getLogger(__name__)

LOOPBACK_HOSTS = ("127.0.0.1", "localhost", "::1")


@dataclass(frozen=True)
class GatewayConfig:
    gateway_id: str
    host: str
    port: int
    api_tokens: tuple[str, ...]
    connector: ConnectorConfig

    def __post_init__(self):
        if not self.api_tokens and self.host not in LOOPBACK_HOSTS:
            raise InvalidRequest(
                f"gateway on non-loopback interface {self.host!r} needs API tokens"
            )

    @property
    def endpoint(self) -> str:
        return f"{self.host}:{self.port}"

    def to_doc(self) -> dict:
        return {
            "gateway_id": self.gateway_id,
            "host": self.host,
            "port": self.port,
            "api_tokens": list(self.api_tokens),
            "connector": self.connector.to_doc(),
        }


def gateway_config_from_doc(doc: Mapping) -> GatewayConfig:
    try:
        return GatewayConfig(
            gateway_id=doc["gateway_id"],
            host=doc["host"],
            port=doc["port"],
            api_tokens=tuple(doc.get("api_tokens", [])),
            connector=connector_config_from_doc(doc["connector"]),
        )
    except (KeyError, TypeError) as exc:
        raise InvalidRequest(f"bad gateway config document: {exc}") from exc


def load_gateway_config(path: str) -> GatewayConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return gateway_config_from_doc(json.load(fh))


class Gateway:
    def __init__(self, config: GatewayConfig) -> None:
        self.config = config
        self.connector = Connector(config.connector)
        self._tokens = frozenset(config.api_tokens)

    def probe(self) -> dict:
        """Reachability snapshot of the connector's targets."""
        statuses: dict[str, str] = {}
        for endpoint in self.config.connector.main_endpoints:
            statuses[f"main:{endpoint}"] = self._probe_one(f"{httpd.base_url(endpoint)}/health")
        for endpoint in self.config.connector.chain_endpoints:
            statuses[f"chain:{endpoint}"] = self._probe_one(f"{httpd.base_url(endpoint)}/health")
        store = self.config.connector.store_endpoint
        if store:
            statuses[f"store:{store}"] = self._probe_one(f"{httpd.base_url(store)}/health")
        return statuses

    def check_startup_probe(self) -> None:
        """Refuse to come up while no ledger endpoint answers.

        A dead store is survivable (only payload fetches fail), so it is
        logged but tolerated; an unreachable ledger makes every request
        fail, so startup stops with a diagnostic instead.
        """
        statuses = self.probe()
        ledger = {t: s for t, s in statuses.items() if not t.startswith("store:")}
        for target, status in statuses.items():
            if status != "ok":
                log.warning("gateway %s: %s is %s", self.config.gateway_id, target, status)
        if ledger and not any(s == "ok" for s in ledger.values()):
            detail = "; ".join(f"{t} {s}" for t, s in ledger.items())
            raise TransportError(
                f"gateway {self.config.gateway_id!r} refusing to start: "
                f"no ledger endpoint reachable ({detail})"
            )

    @staticmethod
    def _probe_one(url: str) -> str:
        try:
            httpd.request_json("GET", url, timeout=(1.0, 3.0))
            return "ok"
        except PhtError as exc:
            return f"unreachable: {exc}"

    # -- handlers -------------------------------------------------------------

    def _authorize(self, req: httpd.Request) -> None:
        if not self._tokens:
            return  # loopback deployment without tokens: open to the host
        token = req.bearer_token()
        if token is None:
            raise Unauthenticated("missing bearer API token")
        if token not in self._tokens:
            raise Unauthenticated("API token rejected")

    def _handle_trajectory(self, req: httpd.Request) -> httpd.Response:
        self._authorize(req)
        patient_id = req.params["patient_id"]
        entries = self.connector.get_trajectory(patient_id)
        return httpd.json_response(
            {"patient_id": patient_id, "entries": [e.to_doc() for e in entries]}
        )

    def _handle_current(self, req: httpd.Request) -> httpd.Response:
        self._authorize(req)
        patient_id = req.params["patient_id"]
        entries = self.connector.current_view(patient_id)
        return httpd.json_response(
            {"patient_id": patient_id, "entries": [e.to_doc() for e in entries]}
        )

    def _handle_reference(self, req: httpd.Request) -> httpd.Response:
        self._authorize(req)
        doc = req.json()
        patient_id = doc.get("patient_id", "")
        kind = doc.get("kind", "ADD")
        note = doc.get("note", "")
        supersedes = doc.get("supersedes", "")
        if kind == "ADD":
            ref = resource_ref_from_doc(doc.get("resource") or {})
            entry = self.connector.add_reference(patient_id, ref, note)
        elif kind == "MODIFY":
            ref = resource_ref_from_doc(doc.get("resource") or {})
            entry = self.connector.modify_reference(patient_id, supersedes, ref, note)
        elif kind == "DELETE":
            entry = self.connector.delete_evidence(patient_id, supersedes, note)
        else:
            raise InvalidRequest(f"kind must be ADD, MODIFY or DELETE, got {kind!r}")
        return httpd.json_response({"entry": entry.to_doc()}, status=201)

    def _handle_evidence(self, req: httpd.Request) -> httpd.Response:
        self._authorize(req)
        patient_values = req.query.get("patient_id") or [""]
        patient_id = patient_values[0]
        if not patient_id:
            raise InvalidRequest("patient_id query parameter is required")
        try:
            height = int(req.params["height"])
        except ValueError:
            raise InvalidRequest("evidence height must be an integer")
        for entry in self.connector.get_trajectory(patient_id):
            if entry.height == height:
                content, hint = self.connector.fetch_evidence(entry)
                return httpd.raw_response(
                    content,
                    headers={
                        "Content-Type": hint or DEFAULT_MEDIA_HINT,
                        "X-Content-Hash": entry.content_hash,
                    },
                )
        raise NotFound(f"no change record at height {height} for {patient_id!r}")

    def _handle_health(self, req: httpd.Request) -> httpd.Response:
        return httpd.json_response(
            {
                "status": "ok",
                "gateway_id": self.config.gateway_id,
                "institution": self.config.connector.institution_id,
                "mode": self.config.connector.mode,
            }
        )

    def router(self) -> httpd.Router:
        r = httpd.Router()
        r.add("GET", "/trajectory/{patient_id}/current", self._handle_current)
        r.add("GET", "/trajectory/{patient_id}", self._handle_trajectory)
        r.add("POST", "/references", self._handle_reference)
        r.add("GET", "/evidence/{height}", self._handle_evidence)
        r.add("GET", "/health", self._handle_health)
        return r


def run_gateway(config: GatewayConfig) -> tuple[Gateway, httpd.ServiceHandle]:
    gw = Gateway(config)
    gw.check_startup_probe()
    handle = httpd.serve(gw.router(), config.host, config.port, f"gateway-{config.gateway_id}")
    return gw, handle


def run_gateway_blocking(config: GatewayConfig) -> None:
    gw = Gateway(config)
    gw.check_startup_probe()
    httpd.run_blocking(gw.router(), config.host, config.port, f"gateway-{config.gateway_id}")
