"""Depth-aided visual-inertial odometry: sliding-window backend, sensor
simulator, trajectory metrics, and marginalization benchmark."""

__version__ = "0.1.0"
