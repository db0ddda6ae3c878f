"""Desk-scale smartphone testbed: log collection, incremental OTA updates,
experiment lifecycle management and a deterministic fleet simulator."""

__version__ = "0.1.0"
