"""btcwatch: measure the Bitcoin P2P network without touching the chain."""

__version__ = "0.1.0"
