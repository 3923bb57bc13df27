"""Mixture of LoRA adapters with sequence-level routing, on a small numpy transformer."""

__version__ = "0.1.0"
