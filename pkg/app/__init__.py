"""erim-forge: inspection, rewriting and simulation for MPK-isolated code."""

__version__ = "0.1.0"
