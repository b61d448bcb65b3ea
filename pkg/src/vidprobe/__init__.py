"""Probe the 3D awareness of frozen video features with a shallow multi-view readout."""

__version__ = "0.1.0"
