"""Feedback Schrodinger bridge matching on numpy."""

__version__ = "0.1.0"
