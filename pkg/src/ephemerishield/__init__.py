"""Tamper-evident replication and screening of satellite ephemerides."""

__version__ = "0.1.0"
