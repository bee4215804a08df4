"""SEMU: SVD-based low-rank adapters for machine unlearning, at desk scale."""

from semu.errors import ConfigError, InvalidInputError, NumericalError, SemuError

__all__ = ["ConfigError", "InvalidInputError", "NumericalError", "SemuError"]
__version__ = "0.1.0"
