"""Recall-retrieve-reason relation extraction toolkit."""

__version__ = "0.1.0"
