"""Firmware-update credentials and trust evaluation for smart inverters."""

__version__ = "0.1.0"
