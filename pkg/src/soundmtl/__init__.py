"""Joint scene/event sound classification with mixup multi-task CNNs, on a
numpy autodiff core."""

__version__ = "0.1.0"
