"""CPU radiance field conditioned on editable Gaussian primitives."""

__version__ = "0.1.0"
