"""Multi-view volumetric human pose pipeline on synthetic joint heatmaps."""

__version__ = "0.1.0"
