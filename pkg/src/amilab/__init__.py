"""Desk-scale lab for attribute-steered adversarial-example detection."""

__version__ = "0.1.0"
