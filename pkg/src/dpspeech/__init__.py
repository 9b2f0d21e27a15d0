"""Privacy-preserving speech-disorder classification toolkit."""
__version__ = "0.1.0"
