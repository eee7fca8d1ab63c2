"""Small builders shared by several test modules."""

import numpy as np

from latentfusion.fusion import Frame
from latentfusion.geometry import CameraIntrinsics, DepthMap, Pose


def plane_frame(z=2.0, w=32, h=24, f=30.0, pose=None) -> Frame:
    """Fronto-parallel plane at camera depth ``z``."""
    intr = CameraIntrinsics(f, f, (w - 1) / 2, (h - 1) / 2, w, h)
    return Frame(DepthMap(np.full((h, w), z)), pose or Pose.identity(), intr)
