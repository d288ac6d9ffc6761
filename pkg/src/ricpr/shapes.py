"""Landmark shapes, face boxes and the fiducial five.

Coordinates are continuous image pixels (x right, y down) everywhere; rounding
only happens when a pixel is sampled.

Canonical 29-point ordering (0-based, "left" means image-left)::

     0  left brow outer      1  right brow outer
     2  left brow inner      3  right brow inner
     4  left brow top        5  right brow top
     6  left brow bottom     7  right brow bottom
     8  left eye outer       9  right eye outer
    10  left eye inner      11  right eye inner
    12  left eye top        13  right eye top
    14  left eye bottom     15  right eye bottom
    16  left pupil          17  right pupil
    18  nose left ala       19  nose right ala
    20  nose tip            21  nose bottom
    22  mouth left corner   23  mouth right corner
    24  upper lip top       25  upper lip bottom
    26  lower lip top       27  lower lip bottom
    28  chin
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_LANDMARKS = 29


class ShapeError(ValueError):
    """Invalid shape, box or index configuration."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AnnotatedShape:
    """29 landmark positions plus per-landmark occlusion flags."""

    points: np.ndarray
    occluded: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (N_LANDMARKS, 2):
            raise ShapeError(f"expected {N_LANDMARKS}x2 points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ShapeError("landmark coordinates must be finite")
        if self.occluded is None:
            occ = np.zeros(N_LANDMARKS, dtype=bool)
        else:
            occ = np.asarray(self.occluded, dtype=bool)
        if occ.shape != (N_LANDMARKS,):
            raise ShapeError(f"expected {N_LANDMARKS} occlusion flags, got {occ.shape}")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "occluded", _frozen(occ))

    def __eq__(self, other):
        if not isinstance(other, AnnotatedShape):
            return NotImplemented
        return bool(
            np.array_equal(self.points, other.points)
            and np.array_equal(self.occluded, other.occluded)
        )

    __hash__ = None  # type: ignore[assignment]

    def with_points(self, points) -> AnnotatedShape:
        return AnnotatedShape(points, self.occluded)

    def with_occluded(self, occluded) -> AnnotatedShape:
        return AnnotatedShape(self.points, occluded)


@dataclass(frozen=True)
class FaceBox:
    x: float
    y: float
    width: float
    height: float

    def __post_init__(self):
        vals = (self.x, self.y, self.width, self.height)
        if not all(np.isfinite(v) for v in vals):
            raise ShapeError(f"non-finite face box {vals}")
        if self.width <= 0 or self.height <= 0:
            raise ShapeError(f"degenerate face box {vals}")

    @classmethod
    def from_list(cls, values) -> FaceBox:
        x, y, w, h = (float(v) for v in values)
        return cls(x, y, w, h)

    def to_list(self) -> list[float]:
        return [float(self.x), float(self.y), float(self.width), float(self.height)]

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x + self.width / 2.0, self.y + self.height / 2.0])

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))

    def scaled(self, factor: float) -> FaceBox:
        """Box scaled about its center."""
        cx, cy = self.center
        w, h = self.width * factor, self.height * factor
        return FaceBox(cx - w / 2.0, cy - h / 2.0, w, h)

    def to_normalized(self, points: np.ndarray) -> np.ndarray:
        """Map pixel coordinates to box-normalized ones, box spanning [-1, 1]^2."""
        c = self.center
        half = np.array([self.width / 2.0, self.height / 2.0])
        return (np.asarray(points, dtype=np.float64) - c) / half

    def from_normalized(self, points: np.ndarray) -> np.ndarray:
        c = self.center
        half = np.array([self.width / 2.0, self.height / 2.0])
        return np.asarray(points, dtype=np.float64) * half + c


@dataclass(frozen=True, eq=False)
class FiducialFive:
    """Left pupil, right pupil, nose tip, left and right mouth corner."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (5, 2):
            raise ShapeError(f"expected 5x2 fiducial points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ShapeError("fiducial coordinates must be finite")
        if not pts[0, 0] < pts[1, 0]:
            raise ShapeError("left pupil must lie left of right pupil")
        object.__setattr__(self, "points", _frozen(pts))

    def __eq__(self, other):
        if not isinstance(other, FiducialFive):
            return NotImplemented
        return bool(np.array_equal(self.points, other.points))

    __hash__ = None  # type: ignore[assignment]

    @property
    def left_pupil(self) -> np.ndarray:
        return self.points[0]

    @property
    def right_pupil(self) -> np.ndarray:
        return self.points[1]

    @property
    def nose_tip(self) -> np.ndarray:
        return self.points[2]

    @property
    def mouth_left(self) -> np.ndarray:
        return self.points[3]

    @property
    def mouth_right(self) -> np.ndarray:
        return self.points[4]


@dataclass(frozen=True)
class LandmarkIndexMap:
    """Which landmark indices (or groups to average) form each fiducial.

    The defaults follow the canonical COFW-style ordering documented in this
    module. Eye groups are also the eye centers used for NME normalization.
    """

    left_eye: tuple[int, ...] = (16,)
    right_eye: tuple[int, ...] = (17,)
    nose_tip: tuple[int, ...] = (20,)
    mouth_left: tuple[int, ...] = (22,)
    mouth_right: tuple[int, ...] = (23,)

    def groups(self) -> tuple[tuple[int, ...], ...]:
        return (self.left_eye, self.right_eye, self.nose_tip, self.mouth_left, self.mouth_right)

    def validate(self, n_points: int = N_LANDMARKS) -> None:
        for group in self.groups():
            if len(group) == 0:
                raise ShapeError("empty landmark group in index map")
            for idx in group:
                if not 0 <= idx < n_points:
                    raise ShapeError(f"landmark index {idx} out of range [0, {n_points})")

    def fiducial_points(self, points: np.ndarray) -> np.ndarray:
        """(5, 2) or (5, 3) group means of ``points``."""
        pts = np.asarray(points, dtype=np.float64)
        self.validate(len(pts))
        return np.stack([pts[list(g)].mean(axis=0) for g in self.groups()])

    def eye_centers(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pts = np.asarray(points, dtype=np.float64)
        self.validate(len(pts))
        return pts[list(self.left_eye)].mean(axis=0), pts[list(self.right_eye)].mean(axis=0)

    def to_dict(self) -> dict:
        return {
            "left_eye": list(self.left_eye),
            "right_eye": list(self.right_eye),
            "nose_tip": list(self.nose_tip),
            "mouth_left": list(self.mouth_left),
            "mouth_right": list(self.mouth_right),
        }

    @classmethod
    def from_dict(cls, d: dict) -> LandmarkIndexMap:
        return cls(**{k: tuple(int(i) for i in v) for k, v in d.items()})


DEFAULT_INDEX_MAP = LandmarkIndexMap()


def normalize_to_box(shape: AnnotatedShape, from_box: FaceBox, to_box: FaceBox) -> AnnotatedShape:
    """Carry ``shape`` from one face box to another by the corner-to-corner affine map."""
    return shape.with_points(transfer_points(shape.points, from_box, to_box))


def transfer_points(points: np.ndarray, from_box: FaceBox, to_box: FaceBox) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    scale = np.array([to_box.width / from_box.width, to_box.height / from_box.height])
    return (pts - [from_box.x, from_box.y]) * scale + [to_box.x, to_box.y]


def fiducials_from_ground_truth(
    shape: AnnotatedShape, index_map: LandmarkIndexMap = DEFAULT_INDEX_MAP
) -> FiducialFive:
    return FiducialFive(index_map.fiducial_points(shape.points))


def similarity_params(src: np.ndarray, dst: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares similarity taking ``src`` onto ``dst`` (Umeyama, 2D).

    Returns ``(scale, rotation, translation)`` with ``dst ~ scale * src @ rotation.T + translation``.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    a = src - mu_s
    b = dst - mu_d
    var_s = (a**2).sum()
    if var_s <= 0:
        raise ShapeError("cannot fit a similarity to coincident points")
    cov = b.T @ a
    u, sig, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    if d == 0:
        d = 1.0
    s = np.diag([1.0, d])
    rot = u @ s @ vt
    scale = float((sig * np.diag(s)).sum() / var_s)
    trans = mu_d - scale * rot @ mu_s
    return scale, rot, trans


def apply_similarity(points: np.ndarray, scale: float, rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    return scale * np.asarray(points, dtype=np.float64) @ rot.T + trans
