"""Joint video-to-command translation and action classification on precomputed features."""

__version__ = "0.1.0"
