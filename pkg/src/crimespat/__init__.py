"""Spatial statistics of acquisitive crime around large multiunit housing."""

__version__ = "0.1.0"
