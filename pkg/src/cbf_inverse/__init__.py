"""Brinkman-Forchheimer flow solver with time-dependent source reconstruction."""

from .fields import Grid, ScalarField, TimeSeries, VelocityField

__all__ = ["Grid", "ScalarField", "TimeSeries", "VelocityField"]
__version__ = "0.1.0"
