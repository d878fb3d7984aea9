"""Multiple-instance active object detection at desk scale."""

__version__ = "0.1.0"
