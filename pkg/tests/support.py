"""Shared builders for the test suite.

Everything here goes through public package APIs only; independent oracles
(hand-rolled encoders, brute-force replays, external digest tools) live in
the test files next to the properties they check.
"""
from __future__ import annotations

import itertools

from pht import httpd
from pht.identity import Credential, generate_credential
from pht.ledger import ChainBuilder, make_transaction, sign_transaction
from pht.node import ChainSpec, LedgerNode, NodeConfig, run_node

_UNIQUE = itertools.count()


def unique_id(prefix: str) -> str:
    return f"{prefix}-{next(_UNIQUE)}"


def institution_cred(actor_id: str | None = None) -> Credential:
    return generate_credential(actor_id or unique_id("hosp"), "institution")


def patient_cred(actor_id: str | None = None) -> Credential:
    return generate_credential(actor_id or unique_id("pat"), "patient")


def validator_creds(chain_id: str, count: int) -> list[Credential]:
    return [
        generate_credential(f"{chain_id}-v{i}", "institution")
        for i in range(1, count + 1)
    ]


def signed_tx(kind: str, description: dict, credential: Credential, created_at=None):
    return sign_transaction(
        make_transaction(kind, description, credential.actor_id, created_at),
        credential.private_key,
    )


def build_patient_chain(writer: Credential, payload_count: int = 3, validators: int = 3):
    """A valid patient chain with ``payload_count`` ADD records."""
    chain_id = unique_id("chain")
    creds = validator_creds(chain_id, validators)
    builder = ChainBuilder(
        chain_id, unique_id("subject"), creds, writer_identities=(writer.identity,)
    )
    for i in range(payload_count):
        builder.append(
            signed_tx(
                "ADD",
                {
                    "ref_url": f"http://127.0.0.1:1/resources/r{i}",
                    "access_key": f"{i:02x}" * 8,
                    "content_hash": f"{i:02x}" * 32,
                    "media_hint": "application/octet-stream",
                },
                writer,
                created_at=1_700_000_000_000 + i,
            )
        )
    return builder.chain(), creds


class ChainCluster:
    """A running thread-mode chain of N validator nodes for protocol tests."""

    def __init__(
        self,
        tmp_path,
        validators: int,
        subject: str | None = None,
        writers: tuple[Credential, ...] = (),
        chain_id: str | None = None,
    ) -> None:
        self.chain_id = chain_id or unique_id("cluster")
        self.subject = subject or unique_id("subject")
        self.creds = validator_creds(self.chain_id, validators)
        self.writers = writers
        ports = httpd.allocate_ports(validators)
        endpoints = {
            c.actor_id: f"127.0.0.1:{port}" for c, port in zip(self.creds, ports)
        }
        chain_spec = ChainSpec(
            chain_id=self.chain_id,
            subject=self.subject,
            validators=tuple(c.identity for c in self.creds),
            writers=tuple(w.identity for w in writers),
        )
        self.configs = [
            NodeConfig(
                node_id=c.actor_id,
                host="127.0.0.1",
                port=int(endpoints[c.actor_id].rsplit(":", 1)[1]),
                data_dir=str(tmp_path / self.chain_id / c.actor_id),
                private_key=c.private_key,
                leader=self.creds[0].actor_id,
                peers={k: v for k, v in endpoints.items() if k != c.actor_id},
                chain=chain_spec,
            )
            for c in self.creds
        ]
        self.nodes: dict[str, LedgerNode] = {}
        self.handles: dict[str, httpd.ServiceHandle] = {}

    def start(self, node_ids=None) -> "ChainCluster":
        for cfg in self.configs:
            if node_ids is None or cfg.node_id in node_ids:
                node, handle = run_node(cfg)
                self.nodes[cfg.node_id] = node
                self.handles[cfg.node_id] = handle
        return self

    @property
    def leader_id(self) -> str:
        return self.creds[0].actor_id

    @property
    def endpoints(self) -> list[str]:
        return [cfg.endpoint for cfg in self.configs]

    def endpoint(self, node_id: str) -> str:
        return next(c.endpoint for c in self.configs if c.node_id == node_id)

    def stop_node(self, node_id: str) -> None:
        self.handles.pop(node_id).stop()
        self.nodes.pop(node_id)

    def stop(self) -> None:
        for handle in self.handles.values():
            handle.stop()
        self.handles.clear()
        self.nodes.clear()
