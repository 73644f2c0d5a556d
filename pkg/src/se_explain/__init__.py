"""SE-vector saliency for small CNNs, with GradCAM and deletion/insertion metrics."""

__version__ = "0.1.0"
