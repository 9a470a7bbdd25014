"""White-box adversarial attacks on point-cloud scene flow estimation."""

__version__ = "0.1.0"

from .scene import FlowField, PointCloud, ScenePair  # noqa: F401
