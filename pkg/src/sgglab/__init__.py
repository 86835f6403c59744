"""Desk-scale scene graph generation: decoupled two-stage pipeline, candidate selection, evaluation."""

__version__ = "0.1.0"
