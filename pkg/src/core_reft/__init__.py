"""Representation finetuning for continual learning on a small frozen encoder."""

__version__ = "0.1.0"
