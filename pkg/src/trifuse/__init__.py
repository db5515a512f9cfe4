"""Multilingual fact-checked-claim retrieval with trainable tri-source fusion."""

__version__ = "0.1.0"
