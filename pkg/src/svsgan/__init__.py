"""Semantic video synthesis with flow-warping SPADE generators and OASIS discriminators."""

__version__ = "0.1.0"
