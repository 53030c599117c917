"""Continuous downscaling of coarse ensemble forecasts with a conditional score model."""

__version__ = "0.1.0"
