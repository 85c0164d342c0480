"""Prompt-based reinforcement learning for next-item recommendation."""

__version__ = "0.1.0"
