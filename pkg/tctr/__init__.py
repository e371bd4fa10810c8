"""Desk-scale temporal-channel transformer for Lidar video object detection."""
__version__ = "0.1.0"
