"""Lane boundaries in bird's-eye view from LiDAR and a re-projected camera image."""

__version__ = "0.1.0"
