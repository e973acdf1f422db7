"""Sensitivity-guided adversarial protection for tiny radiance fields."""

__version__ = "0.1.0"
