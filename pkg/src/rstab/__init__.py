"""rstab: full-frame video stabilization by volume-rendered multi-frame
fusion, with adaptive per-ray depth ranges and optical-flow color
correction, plus an analytic synthetic-scene test bench."""

from .dataio import Dataset, FrameBundle
from .geometry import Intrinsics, Pose

__all__ = ["Dataset", "FrameBundle", "Intrinsics", "Pose"]
__version__ = "0.1.0"
