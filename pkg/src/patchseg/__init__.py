"""Patch-based binary segmentation pipeline for CT-like volumes."""

__version__ = "0.1.0"
