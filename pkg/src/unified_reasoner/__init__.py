"""Prompt-conditioned sequence models for visual recognition and reasoning."""

__version__ = "0.1.0"
