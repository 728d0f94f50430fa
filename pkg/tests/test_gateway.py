"""REST gateway: auth, delegation fidelity, statelessness, startup probe."""
import hashlib

import pytest
import requests

from pht import httpd
from pht.connector import Connector, ConnectorConfig
from pht.errors import InvalidRequest, TransportError
from pht.gateway import GatewayConfig, gateway_config_from_doc, run_gateway
from pht.resources import StoreConfig, run_store

from support import ChainCluster, institution_cred

TOKEN = "practitioner-token-1"
PATIENT = "paula"


@pytest.fixture()
def clinic(tmp_path):
    """Patient ledger + store + direct connector + token-guarded gateway."""
    inst = institution_cred()
    cluster = ChainCluster(tmp_path, 1, writers=(inst,))
    cluster.start()
    store_config = StoreConfig(
        "clinic-store", "127.0.0.1", httpd.allocate_ports(1)[0], str(tmp_path / "store")
    )
    _, store_handle = run_store(store_config)
    connector_config = ConnectorConfig(
        institution_id=inst.actor_id,
        credential=inst,
        mode="direct",
        chain_endpoints=tuple(cluster.endpoints),
        chain_patient_id=PATIENT,
        store_endpoint=store_handle.endpoint,
    )
    gw_config = GatewayConfig(
        gateway_id="gw-clinic",
        host="127.0.0.1",
        port=httpd.allocate_ports(1)[0],
        api_tokens=(TOKEN,),
        connector=connector_config,
    )
    gw, gw_handle = run_gateway(gw_config)
    connector = Connector(connector_config)
    yield gw, gw_handle, connector, gw_config
    gw_handle.stop()
    cluster.stop()
    store_handle.stop()


def _get(handle, path, token=TOKEN, **kwargs):
    headers = {"Authorization": f"Bearer {token}"} if token else {}
    return requests.get(f"http://{handle.endpoint}{path}", headers=headers, **kwargs)


def _post(handle, path, doc, token=TOKEN):
    headers = {"Authorization": f"Bearer {token}"} if token else {}
    return requests.post(f"http://{handle.endpoint}{path}", json=doc, headers=headers)


# ---------------------------------------------------------------------------
# Configuration rules.


def test_non_loopback_gateway_requires_tokens():
    cred = institution_cred()
    connector = ConnectorConfig(cred.actor_id, cred, mode="direct", chain_endpoints=("c:1",))
    with pytest.raises(InvalidRequest, match="tokens"):
        GatewayConfig("gw", "0.0.0.0", 80, (), connector)
    for host in ("127.0.0.1", "localhost", "::1"):
        GatewayConfig("gw", host, 80, (), connector)  # loopback may run open
    config = GatewayConfig("gw", "0.0.0.0", 80, ("t",), connector)
    assert gateway_config_from_doc(config.to_doc()) == config


def test_startup_probe_refuses_without_any_ledger(tmp_path):
    cred = institution_cred()
    connector = ConnectorConfig(
        cred.actor_id, cred, mode="direct", chain_endpoints=("127.0.0.1:1",)
    )
    config = GatewayConfig("gw", "127.0.0.1", httpd.allocate_ports(1)[0], (), connector)
    with pytest.raises(TransportError, match="no ledger endpoint reachable"):
        run_gateway(config)


def test_startup_probe_tolerates_dead_store(tmp_path, caplog):
    inst = institution_cred()
    cluster = ChainCluster(tmp_path, 1, writers=(inst,))
    cluster.start()
    try:
        connector = ConnectorConfig(
            inst.actor_id,
            inst,
            mode="direct",
            chain_endpoints=tuple(cluster.endpoints),
            store_endpoint="127.0.0.1:1",  # nobody home
        )
        config = GatewayConfig("gw", "127.0.0.1", httpd.allocate_ports(1)[0], (), connector)
        gw, handle = run_gateway(config)  # must not raise
        handle.stop()
        statuses = gw.probe()
        assert statuses[f"chain:{cluster.endpoints[0]}"] == "ok"
        assert statuses["store:127.0.0.1:1"].startswith("unreachable")
    finally:
        cluster.stop()


# ---------------------------------------------------------------------------
# Authentication.


def test_requests_need_a_valid_token(clinic):
    _, handle, _, _ = clinic
    assert _get(handle, f"/trajectory/{PATIENT}", token=None).status_code == 401
    assert _get(handle, f"/trajectory/{PATIENT}", token="wrong").status_code == 401
    assert _get(handle, f"/trajectory/{PATIENT}").status_code == 200
    # Health stays open for load balancers and monitors.
    health = requests.get(f"http://{handle.endpoint}/health")
    assert health.status_code == 200
    assert health.json()["gateway_id"] == "gw-clinic"


def test_tokenless_loopback_gateway_is_open(clinic, tmp_path):
    gw, _, _, config = clinic
    open_config = GatewayConfig(
        "gw-open", "127.0.0.1", httpd.allocate_ports(1)[0], (), config.connector
    )
    _, handle = run_gateway(open_config)
    try:
        resp = requests.get(f"http://{handle.endpoint}/trajectory/{PATIENT}")
        assert resp.status_code == 200
    finally:
        handle.stop()


# ---------------------------------------------------------------------------
# Delegation fidelity: the gateway answers exactly what the connector sees.


def test_reference_lifecycle_matches_connector_views(clinic):
    _, handle, connector, _ = clinic
    first_ref = connector.save_payload(b'{"glucose": 5.4}', "application/json")
    created = _post(handle, "/references", {
        "patient_id": PATIENT,
        "resource": first_ref.to_doc(),
        "note": "morning reading",
    })
    assert created.status_code == 201
    first = created.json()["entry"]
    assert first["kind"] == "ADD" and first["height"] == 1
    assert first["note"] == "morning reading"

    second_ref = connector.save_payload(b"scan", "image/png")
    second = _post(handle, "/references", {
        "patient_id": PATIENT, "kind": "ADD", "resource": second_ref.to_doc(),
    }).json()["entry"]

    revised_ref = connector.save_payload(b'{"glucose": 5.6}', "application/json")
    revised = _post(handle, "/references", {
        "patient_id": PATIENT, "kind": "MODIFY", "resource": revised_ref.to_doc(),
        "supersedes": first["tx_id"], "note": "corrected",
    }).json()["entry"]
    assert revised["kind"] == "MODIFY"

    deleted = _post(handle, "/references", {
        "patient_id": PATIENT, "kind": "DELETE", "supersedes": second["tx_id"],
    }).json()["entry"]
    assert deleted["kind"] == "DELETE"

    wire = _get(handle, f"/trajectory/{PATIENT}").json()
    assert wire["patient_id"] == PATIENT
    assert wire["entries"] == [e.to_doc() for e in connector.get_trajectory(PATIENT)]
    current = _get(handle, f"/trajectory/{PATIENT}/current").json()
    assert current["entries"] == [e.to_doc() for e in connector.current_view(PATIENT)]
    assert [e["tx_id"] for e in current["entries"]] == [revised["tx_id"]]


def test_evidence_bytes_round_trip_with_hint_and_hash(clinic):
    _, handle, connector, _ = clinic
    entry = connector.add_evidence(PATIENT, b"imaging blob", "image/png")
    resp = _get(handle, f"/evidence/{entry.height}", params={"patient_id": PATIENT})
    assert resp.status_code == 200
    assert resp.content == b"imaging blob"
    assert resp.headers["Content-Type"] == "image/png"
    assert resp.headers["X-Content-Hash"] == hashlib.sha256(b"imaging blob").hexdigest()


def test_evidence_errors_pass_through(clinic):
    _, handle, connector, _ = clinic
    assert _get(handle, "/evidence/7", params={"patient_id": PATIENT}).status_code == 404
    assert _get(handle, "/evidence/1").status_code == 422  # patient_id required
    assert _get(handle, "/evidence/one", params={"patient_id": PATIENT}).status_code == 422
    entry = connector.delete_evidence(PATIENT, connector.add_evidence(PATIENT, b"x").tx_id)
    # The DELETE record exists but carries no payload.
    resp = _get(handle, f"/evidence/{entry.height}", params={"patient_id": PATIENT})
    assert resp.status_code == 404


def test_reference_endpoint_validates_kind_and_resource(clinic):
    _, handle, _, _ = clinic
    assert _post(handle, "/references", {"patient_id": PATIENT, "kind": "UPSERT"}).status_code == 422
    assert _post(handle, "/references", {"patient_id": PATIENT}).status_code == 422  # no resource
    assert _post(handle, "/references", {
        "patient_id": PATIENT, "kind": "MODIFY",
        "resource": {"url": "http://s/resources/x", "access_key": "k", "content_hash": "h"},
    }).status_code == 422  # MODIFY without supersedes


def test_unknown_routes_are_404(clinic):
    _, handle, _, _ = clinic
    assert _get(handle, "/nope").status_code == 404


def test_gateway_restart_loses_nothing(clinic):
    gw, handle, connector, config = clinic
    entry = connector.add_evidence(PATIENT, b"before restart", "text/plain")
    handle.stop()
    _, handle2 = run_gateway(
        GatewayConfig("gw-clinic", config.host, config.port, config.api_tokens, config.connector)
    )
    try:
        wire = _get(handle2, f"/trajectory/{PATIENT}").json()
        assert [e["tx_id"] for e in wire["entries"]] == [entry.tx_id]
        resp = _get(handle2, f"/evidence/{entry.height}", params={"patient_id": PATIENT})
        assert resp.content == b"before restart"
    finally:
        handle2.stop()
