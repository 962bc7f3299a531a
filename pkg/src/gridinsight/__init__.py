"""Representation learning and insight annotation for power-grid pixel maps."""

__version__ = "0.1.0"
