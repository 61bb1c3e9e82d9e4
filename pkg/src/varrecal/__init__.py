"""Proxy-reliance-controlled conformal recalibration of one-sided VaR."""

__version__ = "0.1.0"
