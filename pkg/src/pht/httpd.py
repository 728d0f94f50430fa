"""Small JSON-over-HTTP plumbing shared by every service in the federation.

One Router maps (method, path pattern) to handler functions; a handler takes
a Request and returns a Response. Services run either on a daemon thread
(tests, embedded use) or as the blocking main loop of a worker process
(the topology harness). The client helpers translate error documents back
into the exception types of :mod:`pht.errors`, so remote failures surface
exactly like local ones.
"""
from __future__ import annotations

import json
import logging
import re
import signal
import socket
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Mapping
from urllib.parse import parse_qs, urlsplit

import requests

from .errors import PhtError, TransportError, error_doc, error_from_code

log = logging.getLogger(__name__)

MAX_BODY_BYTES = 64 * 1024 * 1024
DEFAULT_TIMEOUT = (3.05, 30)


@dataclass
class Request:
    method: str
    path: str
    params: dict[str, str]
    query: dict[str, list[str]]
    headers: Mapping[str, str]
    body: bytes

    def json(self) -> dict:
        from .errors import InvalidRequest

        try:
            doc = json.loads(self.body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise InvalidRequest(f"request body is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise InvalidRequest("request body must be a JSON object")
        return doc

    def query_int(self, name: str, default: int) -> int:
        from .errors import InvalidRequest

        values = self.query.get(name)
        if not values:
            return default
        try:
            return int(values[0])
        except ValueError as exc:
            raise InvalidRequest(f"query parameter {name!r} must be an integer") from exc

    def bearer_token(self) -> str | None:
        auth = self.headers.get("Authorization", "")
        if auth.startswith("Bearer "):
            return auth[len("Bearer ") :]
        return None


@dataclass
class Response:
    status: int = 200
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""


def json_response(doc: dict, status: int = 200) -> Response:
    return Response(
        status=status,
        headers={"Content-Type": "application/json"},
        body=json.dumps(doc).encode("utf-8"),
    )


def raw_response(body: bytes, headers: dict[str, str] | None = None, status: int = 200) -> Response:
    merged = {"Content-Type": "application/octet-stream"}
    merged.update(headers or {})
    return Response(status=status, headers=merged, body=body)


def error_response(exc: PhtError) -> Response:
    return json_response(error_doc(exc), status=exc.http_status)


Handler = Callable[[Request], Response]

_PARAM_RE = re.compile(r"{(\w+)}")


class Router:
    """Method + path-pattern dispatch; patterns use ``{name}`` segments."""

    def __init__(self) -> None:
        self._routes: list[tuple[str, re.Pattern, Handler]] = []

    def add(self, method: str, pattern: str, handler: Handler) -> None:
        regex = re.compile("^" + _PARAM_RE.sub(r"(?P<\1>[^/]+)", pattern) + "$")
        self._routes.append((method.upper(), regex, handler))

    def dispatch(self, request: Request) -> Response:
        from .errors import NotFound

        for method, regex, handler in self._routes:
            if method != request.method:
                continue
            match = regex.match(request.path)
            if match:
                request.params = match.groupdict()
                return handler(request)
        return error_response(NotFound(f"no route for {request.method} {request.path}"))


class _ServiceHandler(BaseHTTPRequestHandler):
    # HTTP/1.0 keeps connection lifecycle trivial: one request, one socket.
    protocol_version = "HTTP/1.0"
    router: Router = None  # type: ignore[assignment]
    service_name = "service"

    def log_message(self, fmt: str, *args) -> None:
        log.debug("%s %s", self.service_name, fmt % args)

    def _read_body(self) -> bytes | None:
        length = int(self.headers.get("Content-Length", 0) or 0)
        if length > MAX_BODY_BYTES:
            self._write(Response(status=413, body=b"body too large"))
            return None
        return self.rfile.read(length) if length else b""

    def _write(self, response: Response) -> None:
        try:
            self.send_response(response.status)
            for name, value in response.headers.items():
                self.send_header(name, value)
            self.send_header("Content-Length", str(len(response.body)))
            self.end_headers()
            if self.command != "HEAD":
                self.wfile.write(response.body)
        except (BrokenPipeError, ConnectionResetError):
            pass  # client went away; nothing to do

    def _handle(self) -> None:
        body = self._read_body()
        if body is None:
            return
        split = urlsplit(self.path)
        request = Request(
            method=self.command,
            path=split.path,
            params={},
            query=parse_qs(split.query),
            headers=self.headers,
            body=body,
        )
        try:
            response = self.router.dispatch(request)
        except PhtError as exc:
            response = error_response(exc)
        except Exception:
            log.exception("%s: unhandled error on %s %s", self.service_name, self.command, self.path)
            response = Response(status=500, body=b"internal error")
        self._write(response)

    do_GET = _handle
    do_POST = _handle
    do_DELETE = _handle
    do_PUT = _handle
    do_HEAD = _handle


@dataclass
class ServiceHandle:
    """A running in-thread service; ``stop()`` frees the port."""

    name: str
    host: str
    port: int
    server: ThreadingHTTPServer
    thread: threading.Thread

    @property
    def endpoint(self) -> str:
        return f"{self.host}:{self.port}"

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=5)


def _make_server(router: Router, host: str, port: int, name: str) -> ThreadingHTTPServer:
    handler = type(
        f"{name.capitalize()}Handler",
        (_ServiceHandler,),
        {"router": router, "service_name": name},
    )
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server


def serve(router: Router, host: str, port: int, name: str) -> ServiceHandle:
    """Start a service on a daemon thread and return its handle."""
    server = _make_server(router, host, port, name)
    thread = threading.Thread(target=server.serve_forever, name=f"{name}-http", daemon=True)
    thread.start()
    bound_port = server.server_address[1]
    log.info("%s listening on %s:%s", name, host, bound_port)
    return ServiceHandle(name=name, host=host, port=bound_port, server=server, thread=thread)


def run_blocking(router: Router, host: str, port: int, name: str) -> None:
    """Serve until SIGTERM/SIGINT; the main loop of a worker process."""
    server = _make_server(router, host, port, name)

    def _stop(signum, frame):
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGTERM, _stop)
    signal.signal(signal.SIGINT, _stop)
    log.info("%s listening on %s:%s", name, host, server.server_address[1])
    try:
        server.serve_forever()
    finally:
        server.server_close()


def allocate_ports(count: int) -> list[int]:
    """Reserve free localhost ports by binding then releasing them."""
    sockets = []
    try:
        for _ in range(count):
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            s.bind(("127.0.0.1", 0))
            sockets.append(s)
        return [s.getsockname()[1] for s in sockets]
    finally:
        for s in sockets:
            s.close()


def port_is_free(host: str, port: int) -> bool:
    s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        s.bind((host, port))
        return True
    except OSError:
        return False
    finally:
        s.close()


def base_url(endpoint: str) -> str:
    return endpoint if endpoint.startswith("http") else f"http://{endpoint}"


def _raise_from_response(resp: requests.Response) -> None:
    try:
        doc = resp.json()
        info = doc["error"]
        raise error_from_code(info["code"], info["message"])
    except (ValueError, KeyError, TypeError):
        raise PhtError(f"HTTP {resp.status_code}: {resp.text[:200]}")


def request_json(
    method: str,
    url: str,
    doc: dict | None = None,
    headers: dict[str, str] | None = None,
    timeout: tuple[float, float] = DEFAULT_TIMEOUT,
) -> dict:
    """Issue a request expecting a JSON document; map errors to exceptions."""
    try:
        resp = requests.request(method, url, json=doc, headers=headers, timeout=timeout)
    except requests.RequestException as exc:
        raise TransportError(f"{method} {url}: {exc}") from exc
    if resp.status_code >= 400:
        _raise_from_response(resp)
    try:
        return resp.json()
    except ValueError as exc:
        raise PhtError(f"{url} returned non-JSON body") from exc


def request_raw(
    method: str,
    url: str,
    data: bytes | None = None,
    headers: dict[str, str] | None = None,
    timeout: tuple[float, float] = DEFAULT_TIMEOUT,
) -> tuple[bytes, Mapping[str, str]]:
    """Issue a request for raw bytes (evidence payloads)."""
    try:
        resp = requests.request(method, url, data=data, headers=headers, timeout=timeout)
    except requests.RequestException as exc:
        raise TransportError(f"{method} {url}: {exc}") from exc
    if resp.status_code >= 400:
        _raise_from_response(resp)
    return resp.content, resp.headers


def upload_bytes(
    url: str,
    data: bytes,
    headers: dict[str, str] | None = None,
    timeout: tuple[float, float] = DEFAULT_TIMEOUT,
) -> dict:
    """POST a raw byte payload, expecting a JSON document back."""
    try:
        resp = requests.post(url, data=data, headers=headers, timeout=timeout)
    except requests.RequestException as exc:
        raise TransportError(f"POST {url}: {exc}") from exc
    if resp.status_code >= 400:
        _raise_from_response(resp)
    try:
        return resp.json()
    except ValueError as exc:
        raise PhtError(f"{url} returned non-JSON body") from exc
