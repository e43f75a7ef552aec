"""Multi-period mean-DCVaR portfolio optimization with recurrent policies."""

__version__ = "0.1.0"
