"""Desk-scale latent-diffusion ensemble forecasting toolkit."""

__version__ = "0.1.0"

from .errors import NumericalError, ValidationError

__all__ = ["NumericalError", "ValidationError", "__version__"]
