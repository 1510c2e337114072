"""Contextual-temperature mixture-of-softmaxes language modeling on a desk."""

__version__ = "0.1.0"
