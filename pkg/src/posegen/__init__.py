"""Object pose estimation supervised by point-cloud generation, in numpy.

Modules:
    geometry   quaternions, rigid transforms, point clouds
    autodiff   small reverse-mode tensor engine with Adam and text checkpoints
    model      fusion network, folding generators and per-point pose head
    losses     pose, symmetric pose, confidence-weighted and Chamfer losses
    metrics    ADD, ADD-S, threshold accuracy, AUC and reports
    refine     point-to-point ICP
    data       synthetic RGB-D style samples and dataset manifests
    training   training and evaluation loops
    cli        ``posegen`` command-line entry point
"""
from .geometry import PointCloud, Quaternion, RigidTransform
from .model import ModelConfig, PoseNet

__all__ = ["PointCloud", "Quaternion", "RigidTransform", "ModelConfig", "PoseNet"]
__version__ = "0.1.0"
