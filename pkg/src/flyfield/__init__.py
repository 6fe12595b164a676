"""Modular neural radiance fields with an interactive octree-cached renderer."""

__version__ = "0.1.0"
