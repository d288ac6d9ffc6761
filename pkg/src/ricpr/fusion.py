"""Variance-gated fusion of predictions from the two initialization families.

If all predictions agree (normalized spread below ``zeta``) their
per-coordinate median is the answer. Otherwise the family with the smaller
spread is trusted: predictions far from that family's median (beyond ``c``
times the median distance) are dropped and the survivors' median is returned.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .shapes import N_LANDMARKS, AnnotatedShape

log = logging.getLogger(__name__)

ALL_AGREE = "all-agree"
TEXTURE = "texture"
POSE = "pose"
FALLBACK = "fallback"


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    zeta: float = 0.08
    outlier_c: float = 1.5

    def __post_init__(self):
        if not self.zeta > 0:
            raise FusionError("zeta must be positive")
        if not self.outlier_c > 0:
            raise FusionError("outlier multiplier must be positive")


@dataclass
class PredictionSet:
    texture_preds: list[AnnotatedShape]
    pose_preds: list[AnnotatedShape]
    normalizer: float  # pixels, the face-box diagonal

    def __post_init__(self):
        if not self.texture_preds and not self.pose_preds:
            raise FusionError("no predictions to fuse")
        if not self.normalizer > 0:
            raise FusionError("normalizer must be positive")


@dataclass
class FusionReport:
    branch: str
    variance: float
    variance_texture: float | None
    variance_pose: float | None
    members: list[tuple[str, int]]  # predictions the output is the median of
    dropped: list[tuple[str, int]] = field(default_factory=list)
    normalizer: float = 1.0
    normalization: str = "box-diagonal"
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        d["members"] = [[f, int(i)] for f, i in self.members]
        d["dropped"] = [[f, int(i)] for f, i in self.dropped]
        return d


def _stack(preds) -> np.ndarray:
    return np.stack([p.points for p in preds]) if preds else np.zeros((0, N_LANDMARKS, 2))


def prediction_variance(preds, normalizer: float) -> float:
    """Normalized spread: sqrt of the landmark-averaged total coordinate variance."""
    pts = _stack(list(preds))
    if len(pts) < 2:
        return 0.0
    pts = pts - pts[0]  # exact zero for identical predictions
    var = pts.var(axis=0).sum(axis=-1)  # (29,) x-variance + y-variance
    return float(np.sqrt(var.mean()) / normalizer)


def _median_shape(preds) -> AnnotatedShape:
    pts = _stack(preds)
    occ = np.stack([p.occluded for p in preds]).astype(np.int64)
    # ties go to occluded
    votes = 2 * occ.sum(axis=0) >= len(preds)
    return AnnotatedShape(np.median(pts, axis=0), votes)


def fuse(preds: PredictionSet, config: FusionConfig = FusionConfig()) -> tuple[AnnotatedShape, FusionReport]:
    tex, pos = list(preds.texture_preds), list(preds.pose_preds)
    tagged = [(TEXTURE, i) for i in range(len(tex))] + [(POSE, i) for i in range(len(pos))]
    everything = tex + pos
    v = prediction_variance(everything, preds.normalizer)
    v_t = prediction_variance(tex, preds.normalizer) if tex else None
    v_p = prediction_variance(pos, preds.normalizer) if pos else None

    if v < config.zeta:
        return _median_shape(everything), FusionReport(ALL_AGREE, v, v_t, v_p, tagged, normalizer=preds.normalizer)

    if v_t is not None and (v_p is None or v_t <= v_p):
        branch, family = TEXTURE, tex
    elif v_p is not None:
        branch, family = POSE, pos
    else:
        msg = "chosen family is empty; using the median of all predictions"
        log.warning(msg)
        return _median_shape(everything), FusionReport(FALLBACK, v, v_t, v_p, tagged, normalizer=preds.normalizer, warnings=[msg])

    pts = _stack(family)
    med = np.median(pts, axis=0)
    dist = np.linalg.norm(pts - med, axis=-1).mean(axis=-1)
    spread = np.median(dist)
    keep = dist <= config.outlier_c * spread
    members = [(branch, int(i)) for i in np.flatnonzero(keep)]
    dropped = [(branch, int(i)) for i in np.flatnonzero(~keep)]
    survivors = [family[i] for i in np.flatnonzero(keep)]
    report = FusionReport(branch, v, v_t, v_p, members, dropped, normalizer=preds.normalizer)
    return _median_shape(survivors), report


def early_goodness(partial_preds, normalizer: float, config: FusionConfig = FusionConfig()) -> bool:
    """Whether the spread of intermediate-stage predictions is below ``zeta``."""
    return prediction_variance(list(partial_preds), normalizer) < config.zeta
