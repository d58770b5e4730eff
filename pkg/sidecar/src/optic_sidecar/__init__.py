"""Detector sidecar: serves /detect and /health over the shared wire contract."""

__version__ = "0.1.0"
