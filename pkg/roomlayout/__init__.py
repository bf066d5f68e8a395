"""
Room layout reconstruction from annotated video frames.

Inputs are per-frame structural element polygons, camera poses and point
tracks; outputs are one 3D plane per element, a labeled triangle mesh and
reprojection metrics with multi-run quality control.
"""

__version__ = "0.1.0"
