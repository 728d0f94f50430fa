"""Patient-centered health record federation.

Each patient's record is an append-only, hash-chained ledger replicated
across a small set of validator nodes; a shared routing ledger maps
patients to wherever their ledger currently lives; evidence payloads sit
in bearer-key blob stores off-chain. Institutions integrate through the
:class:`pht.connector.Connector` SDK or the token-guarded REST gateway,
and the ``pht`` command line deploys and exercises whole federations.
"""

__version__ = "0.1.0"
