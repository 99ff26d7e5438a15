"""Verifiable, reproducible dataset pipelines on a local workspace."""

__version__ = "0.1.0"
