"""Retinal OCT B-scan classification experiments on synthetic phantoms."""

__version__ = "0.1.0"
