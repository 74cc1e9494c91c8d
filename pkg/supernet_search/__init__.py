"""Architecture search over weight-entangled supernets."""

__version__ = "0.1.0"
