"""PET-driven spatial attention for CT tumor segmentation on synthetic phantoms."""

__version__ = "0.1.0"
