"""Trace-driven simulation of adaptive-bitrate players sharing a bottleneck,
with TCP-style sharing, stability tools and fairness-aware allocators."""

__version__ = "0.1.0"
