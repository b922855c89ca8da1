"""Question-based sign language translation with gated question/video fusion, at desk scale."""

__version__ = "0.1.0"
