"""Building change verification from oblique aerial images and LOD-1 models."""

__version__ = "0.1.0"
