"""Canopy height mapping and plantation analytics toolkit."""

__version__ = "0.1.0"

from .features import FeatureMap
from .raster import RasterGrid

__all__ = ["FeatureMap", "RasterGrid", "__version__"]
