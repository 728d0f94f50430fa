"""Ledger nodes: persistence, consensus write path, wire protocol, routing surface."""
import dataclasses
import json

import pytest
import requests

from pht import httpd
from pht.errors import (
    ChainValidationError,
    DuplicateTransaction,
    InvalidRequest,
    KeyMaterialError,
    NotFound,
    PermissionDenied,
    QuorumUnavailable,
    TransportError,
)
from pht.ledger import ChainBuilder, block_to_doc, dump_chain, tx_to_doc
from pht.node import (
    ChainSpec,
    LedgerNode,
    NodeConfig,
    chain_spec_from_doc,
    fetch_blocks,
    fetch_dump,
    fetch_health,
    fetch_height,
    node_config_from_doc,
    run_node,
    submit_tx,
)
from pht.routing import fetch_routing_view, make_register_tx, resolve_route

from support import (
    ChainCluster,
    institution_cred,
    patient_cred,
    signed_tx,
    unique_id,
    validator_creds,
)


def _single_node(tmp_path, subject=None, writers=(), chain_id=None):
    cluster = ChainCluster(tmp_path, 1, subject=subject, writers=writers, chain_id=chain_id)
    cluster.start()
    return cluster


@pytest.fixture()
def trio(tmp_path):
    cluster = ChainCluster(tmp_path, 3, writers=(institution_cred(),))
    cluster.start()
    yield cluster
    cluster.stop()


# ---------------------------------------------------------------------------
# Construction and persistence.


def test_node_must_be_a_validator_with_matching_key(tmp_path):
    creds = validator_creds("c", 2)
    spec = ChainSpec("c", "s", tuple(c.identity for c in creds))
    base = dict(host="127.0.0.1", port=1, data_dir=str(tmp_path / "n"), chain=spec)
    stranger = institution_cred()
    with pytest.raises(InvalidRequest, match="validator set"):
        LedgerNode(NodeConfig(node_id="ghost", private_key=stranger.private_key,
                              leader=creds[0].actor_id, peers={}, **base))
    with pytest.raises(InvalidRequest, match="leader"):
        LedgerNode(NodeConfig(node_id=creds[0].actor_id, private_key=creds[0].private_key,
                              leader="ghost", peers={}, **base))
    with pytest.raises(KeyMaterialError):
        LedgerNode(NodeConfig(node_id=creds[0].actor_id, private_key=stranger.private_key,
                              leader=creds[0].actor_id, peers={}, **base))


def test_chain_spec_rejects_degenerate_sets():
    cred = institution_cred()
    with pytest.raises(InvalidRequest):
        ChainSpec("", "s", (cred.identity,))
    with pytest.raises(InvalidRequest):
        ChainSpec("c", "", (cred.identity,))
    with pytest.raises(InvalidRequest):
        ChainSpec("c", "s", ())
    with pytest.raises(InvalidRequest):
        ChainSpec("c", "s", (cred.identity, cred.identity))


def test_config_docs_roundtrip(tmp_path):
    cluster = ChainCluster(tmp_path, 2)
    config = cluster.configs[0]
    assert node_config_from_doc(config.to_doc()) == config
    assert chain_spec_from_doc(config.chain.to_doc()) == config.chain
    with pytest.raises(InvalidRequest):
        node_config_from_doc({"node_id": "x"})


def test_fresh_node_persists_genesis_and_restarts_with_writes(tmp_path):
    cluster = _single_node(tmp_path)
    writer = cluster.creds[0]
    try:
        block = submit_tx(cluster.endpoints, signed_tx("ADD", {"n": "1"}, writer))
        assert block.height == 1
        assert fetch_height(cluster.endpoints[0]) == 1
    finally:
        cluster.stop()
    # Same data directory, fresh process-equivalent: history must survive.
    node, handle = run_node(cluster.configs[0])
    try:
        assert node.height == 1
        assert node.blocks_snapshot()[1].tx.description == {"n": "1"}
        again = submit_tx([handle.endpoint], signed_tx("ADD", {"n": "2"}, writer))
        assert again.height == 2
    finally:
        handle.stop()


def test_node_refuses_tampered_history(tmp_path):
    cluster = _single_node(tmp_path)
    writer = cluster.creds[0]
    submit_tx(cluster.endpoints, signed_tx("ADD", {"n": "1"}, writer))
    cluster.stop()
    chain_file = tmp_path / cluster.chain_id / cluster.creds[0].actor_id / "chain.dump"
    lines = chain_file.read_text().splitlines()
    doc = json.loads(lines[1])
    doc["commit_signatures"] = []  # strip the quorum but keep hashes intact
    lines[1] = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    chain_file.write_text("\n".join(lines) + "\n")
    with pytest.raises(ChainValidationError, match="quorum"):
        LedgerNode(cluster.configs[0])


def test_node_refuses_history_of_another_chain(tmp_path):
    cluster = ChainCluster(tmp_path, 1)
    other = ChainBuilder("other-chain", "other", [cluster.creds[0]])
    data_dir = tmp_path / cluster.chain_id / cluster.creds[0].actor_id
    data_dir.mkdir(parents=True)
    (data_dir / "chain.dump").write_text(dump_chain(other.chain().blocks))
    with pytest.raises(ChainValidationError, match="different chain"):
        LedgerNode(cluster.configs[0])


def test_node_refuses_replayed_duplicate_transaction_history(tmp_path):
    cluster = ChainCluster(tmp_path, 1)
    cred = cluster.creds[0]
    tx = signed_tx("ADD", {"n": "1"}, cred, created_at=5)
    builder = ChainBuilder(cluster.chain_id, cluster.subject, [cred])
    builder.append(tx)
    builder.append(tx)  # same tx_id at two heights: hashes all check out
    data_dir = tmp_path / cluster.chain_id / cred.actor_id
    data_dir.mkdir(parents=True)
    (data_dir / "chain.dump").write_text(dump_chain(builder.chain().blocks))
    with pytest.raises(ChainValidationError, match="duplicate"):
        LedgerNode(cluster.configs[0])


# ---------------------------------------------------------------------------
# Consensus write path.


def test_commit_replicates_to_every_validator(trio):
    writer = cluster_writer(trio)
    block = submit_tx([trio.endpoint(trio.leader_id)], signed_tx("ADD", {"n": "x"}, writer))
    assert block.height == 1
    assert len(block.commit_signatures) == 3
    for endpoint in trio.endpoints:
        assert fetch_height(endpoint) == 1
    dumps = {fetch_dump(e) for e in trio.endpoints}
    assert len(dumps) == 1  # replicas are byte-identical


def cluster_writer(cluster: ChainCluster):
    return next(iter(cluster.writers))


def test_submit_to_follower_forwards_to_leader(trio):
    writer = cluster_writer(trio)
    follower = [c for c in trio.creds if c.actor_id != trio.leader_id][0]
    block = submit_tx([trio.endpoint(follower.actor_id)], signed_tx("ADD", {"via": "f"}, writer))
    assert block.height == 1
    assert all(fetch_height(e) == 1 for e in trio.endpoints)


def test_relayed_submit_to_follower_is_refused_not_looped(trio):
    writer = cluster_writer(trio)
    follower = [c for c in trio.creds if c.actor_id != trio.leader_id][0]
    tx = signed_tx("ADD", {"via": "relay"}, writer)
    resp = requests.post(
        f"http://{trio.endpoint(follower.actor_id)}/tx",
        json={"tx": tx_to_doc(tx)},
        headers={"X-Relayed": "1"},
    )
    assert resp.status_code == 422
    assert "leader" in resp.json()["error"]["message"]


def test_write_needs_quorum_but_reads_do_not(trio):
    writer = cluster_writer(trio)
    submit_tx(trio.endpoints, signed_tx("ADD", {"n": "1"}, writer))
    # 3 validators -> quorum 3: one dead follower blocks writes...
    follower = [c for c in trio.creds if c.actor_id != trio.leader_id][0]
    trio.stop_node(follower.actor_id)
    with pytest.raises(QuorumUnavailable):
        submit_tx([trio.endpoint(trio.leader_id)], signed_tx("ADD", {"n": "2"}, writer))
    # ...while any single surviving replica still answers reads.
    assert fetch_height(trio.endpoint(trio.leader_id)) == 1
    blocks = fetch_blocks([trio.endpoint(trio.leader_id)])
    assert [b.height for b in blocks] == [0, 1]


def test_dead_leader_means_read_only(trio):
    writer = cluster_writer(trio)
    submit_tx(trio.endpoints, signed_tx("ADD", {"n": "1"}, writer))
    trio.stop_node(trio.leader_id)
    followers = [c.actor_id for c in trio.creds if c.actor_id != trio.leader_id]
    with pytest.raises(QuorumUnavailable):
        submit_tx([trio.endpoint(followers[0])], signed_tx("ADD", {"n": "2"}, writer))
    for node_id in followers:
        assert fetch_height(trio.endpoint(node_id)) == 1


def test_restarted_follower_catches_up_over_the_wire(tmp_path):
    writer = institution_cred()
    cluster = ChainCluster(tmp_path, 4, writers=(writer,))  # quorum 3 of 4
    cluster.start()
    try:
        lagging = [c for c in cluster.creds if c.actor_id != cluster.leader_id][0]
        cluster.stop_node(lagging.actor_id)
        for i in range(3):
            submit_tx([cluster.endpoint(cluster.leader_id)], signed_tx("ADD", {"n": str(i)}, writer))
        cluster.start(node_ids=[lagging.actor_id])
        assert fetch_height(cluster.endpoint(lagging.actor_id)) == 0
        doc = httpd.request_json(
            "POST", f"http://{cluster.endpoint(lagging.actor_id)}/sync", {}
        )
        assert doc == {"height": 3}
        assert fetch_dump(cluster.endpoint(lagging.actor_id)) == fetch_dump(
            cluster.endpoint(cluster.leader_id)
        )
    finally:
        cluster.stop()


def test_gap_commit_backfills_before_applying(tmp_path):
    writer = institution_cred()
    cluster = ChainCluster(tmp_path, 4, writers=(writer,))
    cluster.start()
    try:
        lagging_id = [c for c in cluster.creds if c.actor_id != cluster.leader_id][0].actor_id
        lagging = cluster.nodes[lagging_id]
        cluster.stop_node(lagging_id)  # stops HTTP; the node object keeps its state
        blocks = [
            submit_tx([cluster.endpoint(cluster.leader_id)], signed_tx("ADD", {"n": str(i)}, writer))
            for i in range(3)
        ]
        assert lagging.height == 0
        # Delivering only the newest block forces the replica to fetch the gap.
        assert lagging.commit(blocks[-1]) == 3
        assert lagging.height == 3
    finally:
        cluster.stop()


def test_commit_is_idempotent_and_conflicts_are_refused(trio):
    writer = cluster_writer(trio)
    block = submit_tx(trio.endpoints, signed_tx("ADD", {"n": "1"}, writer))
    follower_ep = trio.endpoint([c for c in trio.creds if c.actor_id != trio.leader_id][0].actor_id)
    doc = httpd.request_json("POST", f"http://{follower_ep}/commit", {"block": block_to_doc(block)})
    assert doc["status"] == "ok"
    # A different block at an occupied height is an integrity violation.
    rogue_tx = signed_tx("ADD", {"n": "rogue"}, writer)
    rogue = ChainBuilder(trio.chain_id, trio.subject, trio.creds)
    forged = rogue.append(rogue_tx)
    resp = requests.post(f"http://{follower_ep}/commit", json={"block": block_to_doc(forged)})
    assert resp.status_code == 502
    assert "conflicting" in resp.json()["error"]["message"]


def test_propose_rejects_blocks_that_do_not_extend_the_tip(trio):
    writer = cluster_writer(trio)
    committed = submit_tx(trio.endpoints, signed_tx("ADD", {"n": "1"}, writer))
    follower_ep = trio.endpoint([c for c in trio.creds if c.actor_id != trio.leader_id][0].actor_id)
    # Height already taken.
    resp = requests.post(f"http://{follower_ep}/propose", json={"block": block_to_doc(committed)})
    assert resp.status_code == 422
    # Right height, wrong linkage.
    detached = ChainBuilder(trio.chain_id, trio.subject, trio.creds)
    detached.append(signed_tx("ADD", {"n": "other"}, writer))
    orphan = detached.append(signed_tx("ADD", {"n": "orphan"}, writer))
    resp = requests.post(f"http://{follower_ep}/propose", json={"block": block_to_doc(orphan)})
    assert resp.status_code == 422
    assert "link" in resp.json()["error"]["message"]


def test_sync_ignores_nodes_of_a_different_chain(tmp_path):
    writer = institution_cred()
    ours = ChainCluster(tmp_path, 1, writers=(writer,), chain_id=unique_id("ours"))
    ours.start()
    theirs = ChainCluster(tmp_path, 1, writers=(writer,), chain_id=unique_id("theirs"))
    theirs.start()
    try:
        for i in range(3):
            submit_tx(theirs.endpoints, signed_tx("ADD", {"n": str(i)}, writer))
        node = ours.nodes[ours.leader_id]
        assert node.sync_from_peers(theirs.endpoints) == 0  # nothing valid to take
        assert node.height == 0
    finally:
        ours.stop()
        theirs.stop()


def test_duplicate_transaction_is_conflict(trio):
    writer = cluster_writer(trio)
    tx = signed_tx("ADD", {"n": "once"}, writer)
    submit_tx(trio.endpoints, tx)
    with pytest.raises(DuplicateTransaction):
        submit_tx(trio.endpoints, tx)
    resp = requests.post(f"http://{trio.endpoint(trio.leader_id)}/tx", json={"tx": tx_to_doc(tx)})
    assert resp.status_code == 409


# ---------------------------------------------------------------------------
# Write permissions.


def test_unknown_creator_is_permission_denied(trio):
    stranger = institution_cred()
    with pytest.raises(PermissionDenied):
        submit_tx(trio.endpoints, signed_tx("ADD", {"n": "x"}, stranger))


def test_tampered_signature_is_permission_denied(trio):
    writer = cluster_writer(trio)
    tx = signed_tx("ADD", {"n": "x"}, writer)
    flipped = ("0" if tx.signature[0] != "0" else "1") + tx.signature[1:]
    bad = dataclasses.replace(tx, signature=flipped)
    with pytest.raises(PermissionDenied):
        submit_tx(trio.endpoints, bad)


def test_non_hex_signature_is_invalid_request(trio):
    writer = cluster_writer(trio)
    tx = dataclasses.replace(signed_tx("ADD", {"n": "x"}, writer), signature="zz-not-hex")
    with pytest.raises(InvalidRequest):
        submit_tx(trio.endpoints, tx)


def test_patient_chain_accepts_patient_writer_but_not_routing_kinds(tmp_path):
    patient = patient_cred()
    cluster = _single_node(tmp_path, writers=(patient,))
    try:
        block = submit_tx(cluster.endpoints, signed_tx("ADD", {"n": "self"}, patient))
        assert block.height == 1
        with pytest.raises(InvalidRequest, match="patient chain"):
            submit_tx(
                cluster.endpoints,
                signed_tx(
                    "REGISTER",
                    {"patient_id": "p", "chain_id": "c", "endpoints": "a:1", "institution": "h"},
                    patient,
                ),
            )
    finally:
        cluster.stop()


# ---------------------------------------------------------------------------
# Read surface.


def test_blocks_range_semantics(trio):
    writer = cluster_writer(trio)
    for i in range(4):
        submit_tx(trio.endpoints, signed_tx("ADD", {"n": str(i)}, writer))
    base = f"http://{trio.endpoint(trio.leader_id)}"
    full = httpd.request_json("GET", f"{base}/blocks")
    assert [b["height"] for b in full["blocks"]] == [0, 1, 2, 3, 4]
    assert full["height"] == 4
    window = httpd.request_json("GET", f"{base}/blocks?from=2&to=3")
    assert [b["height"] for b in window["blocks"]] == [2, 3]
    assert window["height"] == 4
    # Ranges past the tip truncate; the high-water mark says how far the chain goes.
    past = httpd.request_json("GET", f"{base}/blocks?from=3&to=99")
    assert [b["height"] for b in past["blocks"]] == [3, 4]
    assert past["height"] == 4
    empty = httpd.request_json("GET", f"{base}/blocks?from=9")
    assert empty == {"blocks": [], "height": 4}
    assert requests.get(f"{base}/blocks?from=3&to=1").status_code == 422
    assert requests.get(f"{base}/blocks?from=-1").status_code == 422
    assert requests.get(f"{base}/blocks?from=x").status_code == 422


def test_fetch_blocks_client_inclusive_window(trio):
    writer = cluster_writer(trio)
    for i in range(3):
        submit_tx(trio.endpoints, signed_tx("ADD", {"n": str(i)}, writer))
    blocks = fetch_blocks(["127.0.0.1:1"] + trio.endpoints, start=1, end=2)
    assert [b.height for b in blocks] == [1, 2]  # dead endpoint skipped
    assert [b.height for b in fetch_blocks(trio.endpoints, start=1)] == [1, 2, 3]
    with pytest.raises(TransportError):
        fetch_blocks(["127.0.0.1:1"])


def test_height_and_health_documents(trio):
    base = f"http://{trio.endpoint(trio.leader_id)}"
    height = httpd.request_json("GET", f"{base}/height")
    assert height == {"chain_id": trio.chain_id, "height": 0}
    health = fetch_health(trio.endpoint(trio.leader_id))
    assert health["status"] == "ok"
    assert health["role"] == "leader"
    assert health["chain_id"] == trio.chain_id
    follower = [c for c in trio.creds if c.actor_id != trio.leader_id][0]
    assert fetch_health(trio.endpoint(follower.actor_id))["role"] == "follower"


def test_sync_endpoint_validates_body(trio):
    base = f"http://{trio.endpoint(trio.leader_id)}"
    resp = requests.post(f"{base}/sync", json={"endpoints": "not-a-list"})
    assert resp.status_code == 422


# ---------------------------------------------------------------------------
# Routing surface of main-chain nodes.


@pytest.fixture()
def main_cluster(tmp_path):
    cluster = ChainCluster(tmp_path, 3, subject="main", chain_id="main")
    cluster.start()
    yield cluster
    cluster.stop()


def test_main_chain_routing_write_and_read(main_cluster):
    inst = main_cluster.creds[0]
    register = signed_tx(
        "REGISTER",
        {"patient_id": "pat-9", "chain_id": "pat-9-ledger", "endpoints": "a:1,b:2",
         "institution": inst.actor_id},
        inst,
    )
    submit_tx(main_cluster.endpoints, register)
    entry = resolve_route(main_cluster.endpoints, "pat-9")
    assert entry.chain_id == "pat-9-ledger"
    assert entry.endpoints == ("a:1", "b:2")
    assert entry.height == 1
    view = fetch_routing_view(main_cluster.endpoints)
    assert set(view.entries) == {"pat-9"}
    with pytest.raises(NotFound):
        resolve_route(main_cluster.endpoints, "ghost")


def test_main_chain_rejects_evidence_kinds_and_duplicate_register(main_cluster):
    inst = main_cluster.creds[0]
    with pytest.raises(InvalidRequest, match="routing chain"):
        submit_tx(main_cluster.endpoints, signed_tx("ADD", {"n": "x"}, inst))
    register = make_register_tx("pat-1", "pat-1-ledger", ["a:1"], inst.actor_id, inst.actor_id)
    submit_tx(main_cluster.endpoints, signed_tx("REGISTER", dict(register.description), inst))
    duplicate = signed_tx("REGISTER", dict(register.description), inst)
    resp = requests.post(
        f"http://{main_cluster.endpoint(main_cluster.leader_id)}/tx",
        json={"tx": tx_to_doc(duplicate)},
    )
    assert resp.status_code == 409
    with pytest.raises(NotFound):
        submit_tx(
            main_cluster.endpoints,
            signed_tx(
                "RELOCATE",
                {"patient_id": "ghost", "chain_id": "c", "endpoints": "a:1", "institution": inst.actor_id},
                inst,
            ),
        )


def test_main_chain_requires_institution_role(tmp_path):
    # A patient credential added to the writer set still cannot write routes.
    patient = patient_cred()
    cluster = ChainCluster(tmp_path, 1, subject="main", chain_id=unique_id("main"),
                           writers=(patient,))
    cluster.start()
    try:
        tx = signed_tx(
            "REGISTER",
            {"patient_id": "p", "chain_id": "c", "endpoints": "a:1", "institution": "h"},
            patient,
        )
        resp = requests.post(f"http://{cluster.endpoints[0]}/tx", json={"tx": tx_to_doc(tx)})
        assert resp.status_code == 403
        assert "institution" in resp.json()["error"]["message"]
    finally:
        cluster.stop()


def test_route_submission_endpoint_accepts_only_routing_kinds(main_cluster):
    inst = main_cluster.creds[0]
    base = f"http://{main_cluster.endpoint(main_cluster.leader_id)}"
    register = signed_tx(
        "REGISTER",
        {"patient_id": "pat-7", "chain_id": "pat-7-ledger", "endpoints": "a:1",
         "institution": inst.actor_id},
        inst,
    )
    doc = httpd.request_json("POST", f"{base}/route", {"tx": tx_to_doc(register)})
    assert doc["block"]["height"] == 1
    evidence = signed_tx("ADD", {"n": "x"}, inst)
    resp = requests.post(f"{base}/route", json={"tx": tx_to_doc(evidence)})
    assert resp.status_code == 422
    assert "/route" in resp.json()["error"]["message"]


def test_patient_chains_expose_no_routing_surface(trio):
    base = f"http://{trio.endpoint(trio.leader_id)}"
    assert requests.get(f"{base}/route").status_code == 404
    assert requests.get(f"{base}/route/p").status_code == 404
    assert requests.post(f"{base}/route", json={}).status_code == 404
