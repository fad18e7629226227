"""Routed dynamic projection adapters for frozen point-cloud encoders."""

__version__ = "0.1.0"
