"""Deterministic simulated cluster of attested enclaves sharing a provenance ledger."""

__version__ = "0.1.0"
