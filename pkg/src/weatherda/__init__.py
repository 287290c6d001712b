"""Unified domain-adaptive training for query-based 3D detection, at desk scale."""

__version__ = "0.1.0"
