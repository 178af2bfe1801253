"""Ensemble embedding networks with composed prototypes for few-shot class-incremental learning."""

__version__ = "0.1.0"
