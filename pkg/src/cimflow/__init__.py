"""Multi-level compiler and simulator for computing-in-memory DNN accelerators."""

__version__ = "0.1.0"
