"""Cross-modality domain adaptation and segmentation for volumetric images."""

__version__ = "0.1.0"
