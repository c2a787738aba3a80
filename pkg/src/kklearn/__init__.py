"""Learning KKL observers with physics-informed MLPs."""

__version__ = "0.1.0"
