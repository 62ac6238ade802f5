"""Recurrent soft attention for visual question answering, on a small numpy autograd core."""

__version__ = "0.1.0"
