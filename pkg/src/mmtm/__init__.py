"""Multi-task multi-decoder transformer for math word problems."""

__version__ = "0.1.0"
