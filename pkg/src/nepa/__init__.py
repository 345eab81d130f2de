"""Next-embedding predictive autoregression at desk scale."""

__version__ = "0.1.0"
