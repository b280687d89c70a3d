"""Target-weighted cross-validation for spatial prediction models."""

__version__ = "0.1.0"
