"""Screen-content image unwarping with B-spline texture features and blind homography refinement."""

from .geometry import Homography

__all__ = ["Homography"]
__version__ = "0.1.0"
