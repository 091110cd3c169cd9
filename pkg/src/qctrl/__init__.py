"""Workbench for LSTM-surrogate-assisted optimal control of a driven,
non-Markovian two-level system."""

__version__ = "0.1.0"

from .twolevel import BathParams  # noqa: F401
