"""Image-prompt open-set detection and segmentation at desk scale."""

__version__ = "0.1.0"
