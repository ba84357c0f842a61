"""Rigid registration and pose estimation with angle-axis regression and geodesic loss."""
__version__ = "0.1.0"
