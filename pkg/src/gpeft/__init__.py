"""Graph-aware parameter-efficient fine-tuning of a small causal LM, on numpy."""

__version__ = "0.1.0"
