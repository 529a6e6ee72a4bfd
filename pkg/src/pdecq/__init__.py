"""Conserved-quantity discovery and integrability-seeking PDE coefficient search."""

__version__ = "0.1.0"
