"""Cause-aware emotional support response generation on a small numpy autodiff core."""

__version__ = "0.1.0"
