"""Two-stage pansharpening: residual 3D fusion followed by per-band texture transfer."""

__version__ = "0.1.0"
