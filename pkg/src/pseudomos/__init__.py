"""Non-intrusive speech quality regressors trained on pseudo-labeled degraded speech."""

__version__ = "0.1.0"
