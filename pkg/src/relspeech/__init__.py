"""Speech-to-text transformer with bidirectional relative position encodings."""

__version__ = "0.1.0"
