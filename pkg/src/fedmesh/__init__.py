"""Decentralized peer-to-peer federated learning with crash tolerance and
client-driven termination detection."""

__version__ = "0.1.0"
