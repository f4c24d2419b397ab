"""Generative self-training UDA for image-to-image regression."""

__version__ = "0.1.0"
