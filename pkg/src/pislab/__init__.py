"""Instruction-aware cascaded adapters on a frozen toy concept segmenter."""

__version__ = "0.1.0"
