"""Differentiable logic constraints for small-scale two-structure segmentation."""

__version__ = "0.1.0"
