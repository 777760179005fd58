"""ECG pseudo-color rendering and few-shot QT-risk classification toolkit."""

__version__ = "0.1.0"
