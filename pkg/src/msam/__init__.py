"""Long-document multi-label classification and quantification toolkit."""

__version__ = "0.1.0"
