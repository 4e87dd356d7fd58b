"""Contraction-metric synthesis, neural approximation, and robust runtimes."""

__version__ = "0.1.0"
