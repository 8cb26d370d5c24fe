"""Progress-aware transformer speaker for synthetic navigation worlds."""

__version__ = "0.1.0"
