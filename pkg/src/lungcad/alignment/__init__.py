from .estimator import PatchFeatureAligner
from .losses import sce_loss
from .model import AlignConfig, AlignedEncoders, similarity_matrix

__all__ = [
    "AlignConfig",
    "AlignedEncoders",
    "PatchFeatureAligner",
    "sce_loss",
    "similarity_matrix",
]
