"""Desk-scale QLoRA pipeline for telecom instruction data."""

__version__ = "0.1.0"
