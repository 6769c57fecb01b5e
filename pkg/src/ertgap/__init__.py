"""Dyslexic reading-time gap analysis: additive models of skipping and fixation duration."""

__version__ = "0.1.0"
