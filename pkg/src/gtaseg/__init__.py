"""Semi-supervised segmentation with a gentle teaching assistant, at desk scale."""

__version__ = "0.1.0"
