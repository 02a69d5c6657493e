"""Tamper detection for CT volumes: codecs, preprocessing, learners, evaluation."""

__version__ = "0.1.0"
