"""Joint search of temporal-CNN architectures and ultra-low-power NPU configurations."""

__version__ = "0.1.0"
