"""Interpretable Parkinson's speech screening: word-chunk CNN with Grad-CAM."""

__version__ = "0.1.0"
