"""Episodic few-shot training with difficulty-based importance sampling."""

__version__ = "0.1.0"
