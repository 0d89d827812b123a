"""Recurrent affine-field matching with weak supervision, on numpy."""

__version__ = "0.1.0"
