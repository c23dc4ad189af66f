"""Multi-view image/report autoregressive generation at desk scale."""

__version__ = "0.1.0"
