"""SMPLGait: silhouette gait recognition aligned by SMPL-driven feature transforms."""

__version__ = "0.1.0"
