"""Hierarchical RL control of frame QPs and region delta-QPs for task-driven video coding."""

__version__ = "0.1.0"
