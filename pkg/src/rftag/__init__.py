"""Receptive-field-regularized, frequency-aware CNN toolkit for audio tagging."""

__version__ = "0.1.0"
