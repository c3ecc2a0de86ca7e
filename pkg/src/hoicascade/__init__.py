"""Cascaded human-object interaction recognition on synthetic scenes."""

__version__ = "0.1.0"
