"""Fair concurrent training of several federated tasks over one client pool."""

__version__ = "0.1.0"
