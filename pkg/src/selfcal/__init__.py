"""Kinematic self-calibration through chain closures."""
