"""IoU-uniform sample generation, weighted regression and feature-offset-free IoU scoring,
validated on a synthetic detection simulator."""

__version__ = "0.1.0"
