"""Open-set instance segmentation for LiDAR-style point clouds."""

__version__ = "0.1.0"
