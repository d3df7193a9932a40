"""Direct simultaneous registration of overlapping 3D volumes."""

__version__ = "0.1.0"
