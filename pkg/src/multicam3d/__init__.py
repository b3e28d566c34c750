"""Two-stage propose-and-fuse multi-camera 3D object detection at desk scale."""

__version__ = "0.1.0"
