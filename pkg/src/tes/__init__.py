"""Timely edge-learning simulator: delay-budgeted training and deadline-constrained inference."""

__version__ = "0.1.0"
