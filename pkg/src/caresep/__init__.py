"""Query-based sound separation with a shared Swin-Unet encoder."""

__version__ = "0.1.0"
