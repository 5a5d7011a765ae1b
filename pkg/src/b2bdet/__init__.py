"""Two-stage aerial object detection: super-resolution then detection."""

__version__ = "0.1.0"
