"""Cognition/affection-aligned empathetic response generation."""

__version__ = "0.1.0"
