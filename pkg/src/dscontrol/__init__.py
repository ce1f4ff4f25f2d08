"""Preventive dynamic security control via coordinated demand response."""

__version__ = "0.1.0"
