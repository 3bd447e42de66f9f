"""Active sequential measurement selection for single-pixel image recovery."""

__version__ = "0.1.0"
