"""Digital twin of a fiber-coupled quantum frequency conversion chain."""

__version__ = "0.1.0"
