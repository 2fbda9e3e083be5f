"""ExoTST: forecasting an endogenous series from past and future exogenous drivers."""

__version__ = "0.1.0"
