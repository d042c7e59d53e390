"""objrecon: 3D object model reconstruction from RGB-D sequences."""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    CameraIntrinsics,
    NeighborIndex,
    ObjectCloud,
    Pose,
    depth_to_cloud,
    estimate_normals,
    rigid_from_correspondences,
    transform_cloud,
)
