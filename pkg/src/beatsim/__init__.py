"""Deterministic simulator for ledger-backed network infrastructure sharing."""

__version__ = "0.1.0"
