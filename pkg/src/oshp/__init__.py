"""One-shot human parsing with a dual-metric prototype network."""

__version__ = "0.1.0"
