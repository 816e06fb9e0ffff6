"""Segmentation-architecture laboratory: analyzable model graphs, costs, training and inference rewrites."""

from ._accel import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
