"""Desk-scale movie-streaming microservice benchmark with RPC-level tracing."""

__version__ = "0.1.0"
