"""Profiled side-channel attacks with a CBAM attention network."""

__version__ = "0.1.0"
