"""Dual-format multilingual evaluation and FFN neuron probing at desk scale."""

__version__ = "0.1.0"
