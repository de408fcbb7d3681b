"""Self-attentive sequential recommendation on a small numpy autodiff core."""

__version__ = "0.1.0"
