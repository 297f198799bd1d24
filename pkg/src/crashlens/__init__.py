"""Crash outcome prompts, baseline prediction and Shapley attribution."""

__version__ = "0.1.0"
