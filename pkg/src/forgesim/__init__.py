"""Desk-scale federated training simulator with contrastive task banks and adaptive aggregation."""

__version__ = "0.1.0"
