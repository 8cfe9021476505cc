"""Small-footprint multi-channel keyword spotting toolkit."""

__version__ = "0.1.0"
