"""Two-stage coarse-to-fine volumetric multi-class segmentation."""

__version__ = "0.1.0"
