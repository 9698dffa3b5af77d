"""Risk-aware world-model predictive control on a 2D micro-driving simulator."""

__version__ = "0.1.0"
