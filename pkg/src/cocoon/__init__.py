"""Coincidence-based self-supervision, entropy clustering and cluster-based active learning."""

__version__ = "0.1.0"
