"""Unified decision making and local trajectory planning with time-varying
artificial potential fields, plus a deterministic closed-loop simulator."""

__version__ = "0.1.0"
