"""Kernel attention module (KAM) in a compact EEGNet backbone."""

__version__ = "0.1.0"
