"""Synthetic event-camera stream generation from conditioning inputs."""

__version__ = "0.1.0"
