"""Promptable-query 3D scene understanding on procedurally generated scenes."""

__version__ = "0.1.0"
