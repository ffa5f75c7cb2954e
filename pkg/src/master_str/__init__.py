"""Desk-scale scene-text recognizer: multi-aspect global-context encoder, transformer decoder, cached greedy decoding."""

__version__ = "0.1.0"
