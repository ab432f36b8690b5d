"""Desk-scale laboratory for instance-dependent partial-label learning."""

__version__ = "0.1.0"
