"""Multi-view 3D point tracking on fused depth point clouds."""

__version__ = "0.1.0"
