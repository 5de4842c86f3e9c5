"""Word-level fabrication benchmark generation and detection toolkit."""

__version__ = "0.1.0"
