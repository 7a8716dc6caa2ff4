"""Near/far-field UAV channel estimation: simulator, numpy autodiff models and baselines."""

__version__ = "0.1.0"
