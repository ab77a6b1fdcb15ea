"""Goodput and bottleneck measurement harness for QUIC and TCP/TLS endpoints."""

__version__ = "0.1.0"
