"""Fast-and-slow continual learning engine and benchmark harness."""

__version__ = "0.1.0"
