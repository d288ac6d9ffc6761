"""Pose-correlated initialization.

A rough head pose is estimated from the five fiducial points against a 3D
mean shape, then a 29-point 3D mean face (or a frontal variant of it) is
projected under that pose and similarity-aligned onto the fiducials.

Camera convention: pinhole with focal length equal to the face-box width and
the principal point at the box center. Pose rotations map model coordinates
(x right, y down, z away from the camera) into the camera frame, so the zero
rotation vector is a frontal face.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .epnp import PnPError, project, solve_epnp
from .shapes import (
    DEFAULT_INDEX_MAP,
    N_LANDMARKS,
    AnnotatedShape,
    FaceBox,
    FiducialFive,
    LandmarkIndexMap,
    apply_similarity,
    similarity_params,
)

log = logging.getLogger(__name__)

MEAN_SHAPE_MAGIC = "ricpr-mean-shape"
MEAN_SHAPE_VERSION = 1

DEFAULT_OCCLUSION_RATE = 0.23
DEFAULT_CLAMP_FACTOR = 1.2


class PoseError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MeanShape3D:
    points: np.ndarray  # (n, 3), centroid at the origin
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) not in (5, N_LANDMARKS):
            raise PoseError(f"mean shape must be 5x3 or {N_LANDMARKS}x3, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise PoseError("mean shape has non-finite coordinates")
        scale = max(1.0, float(np.abs(pts).max()))
        if np.abs(pts.mean(axis=0)).max() > 1e-9 * scale:
            raise PoseError("mean shape centroid must be at the origin")
        ids = tuple(self.ids) if self.ids else tuple(str(i) for i in range(len(pts)))
        if len(ids) != len(pts):
            raise PoseError("one id per point required")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "ids", ids)

    @classmethod
    def centered(cls, points, ids=()) -> MeanShape3D:
        pts = np.asarray(points, dtype=np.float64)
        return cls(pts - pts.mean(axis=0), ids)

    @property
    def arity(self) -> int:
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, MeanShape3D):
            return NotImplemented
        return self.ids == other.ids and bool(np.array_equal(self.points, other.points))

    __hash__ = None  # type: ignore[assignment]


def parse_mean_shape(text: str) -> MeanShape3D:
    """Parse the versioned mean-shape text format.

    Line 1 is ``ricpr-mean-shape <version>``, line 2 ``arity <n>``, then ``n``
    rows of ``<id> <x> <y> <z>``. ``#`` starts a comment line. Rows are
    re-centered on load.
    """
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or not lines[0].startswith(MEAN_SHAPE_MAGIC):
        raise PoseError("not a mean-shape file")
    try:
        version = int(lines[0].split()[1])
    except (IndexError, ValueError):
        raise PoseError("missing mean-shape format version") from None
    if version > MEAN_SHAPE_VERSION:
        raise PoseError(f"mean-shape format version {version} is newer than supported {MEAN_SHAPE_VERSION}")
    head = lines[1].split() if len(lines) > 1 else []
    if len(head) != 2 or head[0] != "arity":
        raise PoseError("second line must be 'arity <n>'")
    arity = int(head[1])
    rows = lines[2:]
    if len(rows) != arity:
        raise PoseError(f"arity {arity} declared but {len(rows)} rows found")
    ids, pts = [], []
    for i, row in enumerate(rows):
        parts = row.split()
        if len(parts) != 4:
            raise PoseError(f"row {i}: expected '<id> <x> <y> <z>'")
        ids.append(parts[0])
        pts.append([float(v) for v in parts[1:]])
    return MeanShape3D.centered(np.array(pts), ids)


def format_mean_shape(shape: MeanShape3D) -> str:
    out = [f"{MEAN_SHAPE_MAGIC} {MEAN_SHAPE_VERSION}", f"arity {shape.arity}", "# id x y z"]
    out += [f"{i} {x!r} {y!r} {z!r}" for i, (x, y, z) in zip(shape.ids, shape.points.tolist())]
    return "\n".join(out) + "\n"


def load_mean_shape(path=None, arity: int = N_LANDMARKS) -> MeanShape3D:
    """Load a mean-shape file; ``None`` gives the bundled default of that arity."""
    if path is None:
        text = resources.files("ricpr").joinpath(f"data/mean_shape_{arity}.txt").read_text()
    else:
        text = Path(path).read_text()
    return parse_mean_shape(text)


def fiducial_mean_shape(
    mean29: MeanShape3D, index_map: LandmarkIndexMap = DEFAULT_INDEX_MAP
) -> tuple[MeanShape3D, np.ndarray]:
    """Five-point mean shape from the fiducial groups of ``mean29``.

    Also returns the offset of its centroid in the 29-point frame.
    """
    pts = index_map.fiducial_points(mean29.points)
    offset = pts.mean(axis=0)
    ids = ("left_pupil", "right_pupil", "nose_tip", "mouth_left", "mouth_right")
    return MeanShape3D(pts - offset, ids), offset


@dataclass(frozen=True)
class CameraModel:
    focal: float
    cx: float
    cy: float

    def __post_init__(self):
        if not self.focal > 0:
            raise PoseError("focal length must be positive")

    @classmethod
    def for_box(cls, box: FaceBox) -> CameraModel:
        c = box.center
        return cls(float(box.width), float(c[0]), float(c[1]))

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.focal, 0.0, self.cx], [0.0, self.focal, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class FacePose:
    rotation: np.ndarray  # axis-angle, radians
    translation: np.ndarray  # model units
    camera: CameraModel
    residual_px: float = 0.0  # RMS reprojection error of the fit
    warning: bool = False

    @property
    def rotation_matrix(self) -> np.ndarray:
        return Rotation.from_rotvec(self.rotation).as_matrix()

    def shifted_origin(self, offset: np.ndarray) -> FacePose:
        """Re-express the pose for model points ``X`` when it was fit on ``X - offset``."""
        t = self.translation - self.rotation_matrix @ np.asarray(offset, dtype=np.float64)
        return FacePose(self.rotation, t, self.camera, self.residual_px, self.warning)


def rotation_angle_between(r1: np.ndarray, r2: np.ndarray) -> float:
    """Angular distance in radians between two rotation vectors."""
    rel = Rotation.from_rotvec(r1) * Rotation.from_rotvec(r2).inv()
    return float(rel.magnitude())


def _refine(pw, uv, k, rvec, t):
    def resid(x):
        r = Rotation.from_rotvec(x[:3]).as_matrix()
        return (project(pw, r, x[3:], k) - uv).ravel()

    sol = least_squares(resid, np.r_[rvec, t], method="lm", xtol=1e-14, ftol=1e-14, gtol=1e-14)
    return sol.x[:3], sol.x[3:]


def estimate_pose(
    mean5: MeanShape3D,
    fiducials: FiducialFive,
    camera: CameraModel,
    refine: bool = True,
    residual_warn: float = 0.05,
) -> FacePose:
    """Rough face pose from five 2D-3D correspondences.

    EPnP gives the closed-form estimate; ``refine`` then minimizes the
    reprojection error of the five points directly. ``residual_warn`` is the
    RMS reprojection error, as a fraction of the focal length, above which the
    result carries a warning flag.
    """
    if mean5.arity != 5:
        raise PoseError(f"pose estimation needs a 5-point mean shape, got {mean5.arity}")
    pw = mean5.points
    uv = fiducials.points
    k = camera.matrix
    try:
        sol = solve_epnp(pw, uv, k)
    except PnPError as exc:
        raise PoseError(str(exc)) from exc
    rvec = Rotation.from_matrix(sol.rotation).as_rotvec()
    t = sol.translation
    if refine:
        r2, t2 = _refine(pw, uv, k, rvec, t)
        if np.all(np.isfinite(r2)) and np.all(np.isfinite(t2)) and t2[2] > 0:
            rvec = Rotation.from_rotvec(r2).as_rotvec()  # wrap to magnitude <= pi
            t = t2
    proj = project(pw, Rotation.from_rotvec(rvec).as_matrix(), t, k)
    rms = float(np.sqrt(np.mean(np.sum((proj - uv) ** 2, axis=1))))
    warn = rms > residual_warn * camera.focal
    if warn:
        log.warning("pose fit residual %.2f px exceeds %.2f px", rms, residual_warn * camera.focal)
    return FacePose(rvec, np.asarray(t, dtype=np.float64), camera, rms, warn)


def project_points(points3d: np.ndarray, pose: FacePose) -> np.ndarray:
    """Pinhole projection of model points under ``pose``."""
    pc = np.asarray(points3d, dtype=np.float64) @ pose.rotation_matrix.T + pose.translation
    if np.any(pc[:, 2] <= 0):
        raise PoseError("projected shape lies (partly) behind the camera")
    return project(np.asarray(points3d, dtype=np.float64), pose.rotation_matrix, pose.translation, pose.camera.matrix)


def align_to_fiducials(
    points2d: np.ndarray, fiducials: FiducialFive, index_map: LandmarkIndexMap = DEFAULT_INDEX_MAP
) -> tuple[np.ndarray, float]:
    """Similarity-align a 29-point set so its fiducial subset best matches ``fiducials``.

    Returns the aligned points and the RMS residual (pixels) of the fit.
    """
    src = index_map.fiducial_points(points2d)
    s, r, t = similarity_params(src, fiducials.points)
    aligned = apply_similarity(points2d, s, r, t)
    resid = apply_similarity(src, s, r, t) - fiducials.points
    return aligned, float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))


def random_occlusion(rng: np.random.Generator, rate: float = DEFAULT_OCCLUSION_RATE, n: int = N_LANDMARKS) -> np.ndarray:
    return rng.random(n) < rate


def project_shape(
    mean29: MeanShape3D,
    pose: FacePose,
    box: FaceBox,
    fiducials: FiducialFive,
    index_map: LandmarkIndexMap = DEFAULT_INDEX_MAP,
    rng: np.random.Generator | None = None,
    occlusion_rate: float = DEFAULT_OCCLUSION_RATE,
    clamp_factor: float = DEFAULT_CLAMP_FACTOR,
) -> AnnotatedShape:
    """Pose-correlated initial shape: project, align to the fiducials, clamp to the box.

    ``pose`` must be expressed in ``mean29``'s model frame. Occlusion flags are
    drawn independently per landmark with probability ``occlusion_rate``.
    """
    if mean29.arity != N_LANDMARKS:
        raise PoseError(f"expected a {N_LANDMARKS}-point mean shape, got {mean29.arity}")
    projected = project_points(mean29.points, pose)
    aligned, _ = align_to_fiducials(projected, fiducials, index_map)
    lim = box.scaled(clamp_factor)
    aligned[:, 0] = np.clip(aligned[:, 0], lim.x, lim.x + lim.width)
    aligned[:, 1] = np.clip(aligned[:, 1], lim.y, lim.y + lim.height)
    rng = rng if rng is not None else np.random.default_rng(0)
    return AnnotatedShape(aligned, random_occlusion(rng, occlusion_rate))


def frontal_variants(frontal_shapes, mean29: MeanShape3D) -> list[MeanShape3D]:
    """3D variants of ``mean29`` whose (x, y) come from frontal 2D training shapes.

    Each 2D shape is centered and isotropically scaled to the RMS radius of
    ``mean29``'s (x, y); the mean shape's depths are kept. An empty input gives
    ``[mean29]``.
    """
    shapes = list(frontal_shapes)
    if not shapes:
        return [mean29]
    ref = mean29.points[:, :2]
    ref_rms = np.sqrt(np.mean(np.sum(ref**2, axis=1)))
    out = []
    for s in shapes:
        pts = np.asarray(s.points if isinstance(s, AnnotatedShape) else s, dtype=np.float64)
        c = pts - pts.mean(axis=0)
        rms = np.sqrt(np.mean(np.sum(c**2, axis=1)))
        if rms == 0:
            raise PoseError("frontal shape has coincident points")
        xyz = np.column_stack([c * (ref_rms / rms), mean29.points[:, 2]])
        out.append(MeanShape3D.centered(xyz, mean29.ids))
    return out


def select_frontal_shapes(
    shapes, boxes, count: int, mean29: MeanShape3D, index_map: LandmarkIndexMap = DEFAULT_INDEX_MAP
) -> list[int]:
    """Indices of the ``count`` training shapes with the smallest estimated rotation.

    Pose is estimated from each shape's own fiducial groups. Shapes whose pose
    cannot be estimated are skipped. Ties keep input order.
    """
    if count <= 0:
        return []
    mean5, _ = fiducial_mean_shape(mean29, index_map)
    scored = []
    for i, (shape, box) in enumerate(zip(shapes, boxes)):
        try:
            fid = FiducialFive(index_map.fiducial_points(shape.points))
            pose = estimate_pose(mean5, fid, CameraModel.for_box(box))
        except (PoseError, ValueError):
            continue
        scored.append((float(np.linalg.norm(pose.rotation)), i))
    scored.sort()
    return [i for _, i in scored[:count]]


@dataclass
class PoseInitializer:
    """Pose-correlated initial shapes from a fixed list of 3D variants.

    ``variants[0]`` is conventionally the mean shape itself; the 5-point mean
    shape used for pose estimation is derived from it.
    """

    variants: list[MeanShape3D]
    index_map: LandmarkIndexMap = DEFAULT_INDEX_MAP
    occlusion_rate: float = DEFAULT_OCCLUSION_RATE
    clamp_factor: float = DEFAULT_CLAMP_FACTOR
    _mean5: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.variants:
            raise PoseError("at least one 3D shape variant is required")

    def mean5(self) -> tuple[MeanShape3D, np.ndarray]:
        if self._mean5 is None:
            self._mean5 = fiducial_mean_shape(self.variants[0], self.index_map)
        return self._mean5

    def __call__(self, box: FaceBox, fiducials: FiducialFive, count: int, rng: np.random.Generator) -> list[AnnotatedShape]:
        return pose_init_shapes(
            box, fiducials, self.variants, count, rng,
            index_map=self.index_map,
            occlusion_rate=self.occlusion_rate,
            clamp_factor=self.clamp_factor,
            mean5=self.mean5(),
        )


def pose_init_shapes(
    box: FaceBox,
    fiducials: FiducialFive,
    variants: list[MeanShape3D],
    count: int,
    rng: np.random.Generator,
    index_map: LandmarkIndexMap = DEFAULT_INDEX_MAP,
    occlusion_rate: float = DEFAULT_OCCLUSION_RATE,
    clamp_factor: float = DEFAULT_CLAMP_FACTOR,
    mean5: tuple[MeanShape3D, np.ndarray] | None = None,
) -> list[AnnotatedShape]:
    """Estimate the pose once and project the first ``count`` variants under it."""
    if count > len(variants):
        raise PoseError(f"asked for {count} pose initial shapes but only {len(variants)} variants exist")
    if count <= 0:
        return []
    m5, offset = mean5 if mean5 is not None else fiducial_mean_shape(variants[0], index_map)
    pose = estimate_pose(m5, fiducials, CameraModel.for_box(box)).shifted_origin(offset)
    return [
        project_shape(v, pose, box, fiducials, index_map, rng, occlusion_rate, clamp_factor)
        for v in variants[:count]
    ]
