"""Satellite image timeseries dataset builder."""

__version__ = "0.1.0"
