"""Occlusion-robust facial landmark localization.

A fern cascade regresses 29 landmarks and their occlusion states from several
initial shapes. Half of them come from training faces whose texture
correlates best with the test face. The rest come from a 3D mean shape
projected under the head pose estimated from five fiducial points. The
resulting predictions are fused by a variance rule.
"""

__version__ = "0.1.0"

from .shapes import (  # noqa: E402
    DEFAULT_INDEX_MAP,
    N_LANDMARKS,
    AnnotatedShape,
    FaceBox,
    FiducialFive,
    LandmarkIndexMap,
)

__all__ = [
    "DEFAULT_INDEX_MAP",
    "N_LANDMARKS",
    "AnnotatedShape",
    "FaceBox",
    "FiducialFive",
    "LandmarkIndexMap",
]
