"""Anatomy-aware low-dose CT denoising on synthetic phantoms."""

__version__ = "0.1.0"
