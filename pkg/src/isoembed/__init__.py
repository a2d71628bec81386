"""Grid laboratory for corrugation and strain stages of isometric embedding schemes."""

from .grid import GridField, GridSpec, HolderEstimate, holder_norm, partial, pullback

__all__ = ["GridField", "GridSpec", "HolderEstimate", "holder_norm", "partial", "pullback"]
__version__ = "0.1.0"
