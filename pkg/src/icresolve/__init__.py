"""Layered indirect-call target resolution with confidence-annotated call graphs."""

__version__ = "0.1.0"
