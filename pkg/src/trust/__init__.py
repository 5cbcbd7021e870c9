"""Split-merge table structure recognition toolkit."""

__version__ = "0.1.0"
