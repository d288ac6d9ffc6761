"""Synthetic occluded faces for smoke tests, demos and the desk-scale acceptance runs.

Each face is the bundled 3D mean shape under a random head pose, a mild
affine perturbation and per-landmark jitter, rendered as soft blobs on a
textured background. An optional rectangular occluder flags the landmarks it
covers as occluded.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom
from scipy.spatial.transform import Rotation

from .dataset import DatasetRecord, save_image_gray, write_manifest
from .pose import MeanShape3D, load_mean_shape
from .shapes import DEFAULT_INDEX_MAP, AnnotatedShape, FaceBox, FiducialFive

# (landmark group, blob sigma in inter-pupil units, intensity change)
_BLOBS = (
    (range(0, 8), 0.07, -55.0),  # brows
    ((8, 9, 10, 11), 0.06, -30.0),  # eye corners
    ((12, 13, 14, 15), 0.05, -25.0),  # lids
    ((16, 17), 0.09, -85.0),  # pupils
    ((18, 19, 21), 0.07, -35.0),  # nostrils
    ((20,), 0.09, 30.0),  # nose tip highlight
    ((22, 23), 0.07, -50.0),  # mouth corners
    ((24, 25, 26, 27), 0.08, -60.0),  # lips
    ((28,), 0.12, -20.0),  # chin shadow
)


@dataclass
class SyntheticFace:
    image: np.ndarray  # uint8
    shape: AnnotatedShape
    box: FaceBox
    rotation: np.ndarray  # planted head rotation vector

    @property
    def fiducials(self) -> FiducialFive:
        return FiducialFive(DEFAULT_INDEX_MAP.fiducial_points(self.shape.points))


def _smooth_noise(rng, size, cells, amp):
    coarse = rng.normal(scale=amp, size=(cells, cells))
    return zoom(coarse, size / cells, order=1)[:size, :size]


def synth_shape(rng, mean29: MeanShape3D, ipd_px: float, center, max_yaw=30.0, max_pitch=15.0, max_roll=20.0):
    """Projected 2D landmark set and the planted rotation vector."""
    angles = np.radians([rng.uniform(-max_yaw, max_yaw), rng.uniform(-max_pitch, max_pitch), rng.uniform(-max_roll, max_roll)])
    rot = Rotation.from_euler("yxz", angles)
    x = rot.apply(mean29.points)
    depth = 4.0
    uv = x[:, :2] / (1.0 + x[:, 2:3] / depth)
    aff = np.array([[rng.uniform(0.92, 1.08), rng.uniform(-0.06, 0.06)], [0.0, rng.uniform(0.92, 1.08)]])
    uv = uv @ aff.T
    uv = uv * ipd_px + center
    uv = uv + rng.normal(scale=0.02 * ipd_px, size=uv.shape)
    return uv, rot.as_rotvec()


def render_face(rng, pts: np.ndarray, size: int, ipd_px: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = 90.0 + _smooth_noise(rng, size, 6, 25.0)
    # face ellipse around the landmark cloud, tilted with the eye line
    c = pts.mean(axis=0) + [0.0, -0.1 * ipd_px]
    eye = pts[17] - pts[16]
    ang = np.arctan2(eye[1], eye[0])
    dx, dy = xx - c[0], yy - c[1]
    u = dx * np.cos(ang) + dy * np.sin(ang)
    v = -dx * np.sin(ang) + dy * np.cos(ang)
    ax, ay = 1.05 * ipd_px, 1.45 * ipd_px
    r = np.sqrt((u / ax) ** 2 + (v / ay) ** 2)
    skin = rng.uniform(150.0, 200.0)
    face = 1.0 / (1.0 + np.exp((r - 1.0) * 12.0))
    img = img * (1 - face) + skin * face
    # illumination gradient across the face
    g = rng.normal(scale=0.25, size=2)
    img = img + face * 20.0 * (g[0] * dx + g[1] * dy) / ipd_px
    for group, sigma, amp in _BLOBS:
        s = sigma * ipd_px
        for j in group:
            img += amp * np.exp(-((xx - pts[j, 0]) ** 2 + (yy - pts[j, 1]) ** 2) / (2 * s * s))
    img += rng.normal(scale=4.0, size=img.shape)
    return img


def _occlude(rng, img, pts, box: FaceBox):
    w = rng.uniform(0.3, 0.6) * box.width
    h = rng.uniform(0.3, 0.6) * box.height
    x0 = rng.uniform(box.x - 0.2 * w, box.x + box.width - 0.8 * w)
    y0 = rng.uniform(box.y - 0.2 * h, box.y + box.height - 0.8 * h)
    xi0, yi0 = int(max(0, np.floor(x0))), int(max(0, np.floor(y0)))
    xi1, yi1 = int(min(img.shape[1], np.ceil(x0 + w))), int(min(img.shape[0], np.ceil(y0 + h)))
    base = rng.uniform(30.0, 230.0)
    patch_h, patch_w = yi1 - yi0, xi1 - xi0
    if patch_h <= 0 or patch_w <= 0:
        return np.zeros(len(pts), dtype=bool)
    if rng.random() < 0.5:
        period = rng.uniform(4.0, 10.0)
        stripes = 40.0 * np.sin(2 * np.pi * np.arange(patch_w) / period)[None, :]
        patch = base + stripes + rng.normal(scale=6.0, size=(patch_h, patch_w))
    else:
        patch = base + rng.normal(scale=25.0, size=(patch_h, patch_w))
    img[yi0:yi1, xi0:xi1] = patch
    return (pts[:, 0] >= xi0) & (pts[:, 0] < xi1) & (pts[:, 1] >= yi0) & (pts[:, 1] < yi1)


def make_face(rng: np.random.Generator, mean29: MeanShape3D | None = None, size: int = 160, occluder_prob: float = 0.5, **pose_ranges) -> SyntheticFace:
    mean29 = mean29 or load_mean_shape()
    ipd = rng.uniform(34.0, 42.0)
    center = np.array([size / 2.0, size / 2.0 - 0.25 * ipd]) + rng.uniform(-6.0, 6.0, size=2)
    pts, rvec = synth_shape(rng, mean29, ipd, center, **pose_ranges)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    side = max(hi - lo) * 1.2 * rng.uniform(0.95, 1.05)
    bc = (lo + hi) / 2.0 + rng.normal(scale=0.03 * side, size=2)
    box = FaceBox(bc[0] - side / 2.0, bc[1] - side / 2.0, side, side)
    img = render_face(rng, pts, size, ipd)
    occ = np.zeros(len(pts), dtype=bool)
    if rng.random() < occluder_prob:
        occ = _occlude(rng, img, pts, box)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return SyntheticFace(img, AnnotatedShape(pts, occ), box, rvec)


def make_faces(n: int, seed: int, **kwargs) -> list[SyntheticFace]:
    rng = np.random.default_rng(seed)
    mean29 = kwargs.pop("mean29", None) or load_mean_shape()
    return [make_face(rng, mean29, **kwargs) for _ in range(n)]


def write_dataset(out_dir, n_train: int, n_test: int, seed: int, with_fiducials: bool = True, **kwargs) -> Path:
    """Write PNGs plus ``manifest.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    faces = make_faces(n_train + n_test, seed, **kwargs)
    records = []
    for i, face in enumerate(faces):
        name = f"images/{i:05d}.png"
        save_image_gray(out / name, face.image)
        records.append(
            DatasetRecord(
                record_id=f"{i:05d}",
                image=out / name,
                box=face.box,
                shape=face.shape,
                fiducials=face.fiducials if with_fiducials else None,
                split="train" if i < n_train else "test",
            )
        )
    manifest = out / "manifest.jsonl"
    write_manifest(records, manifest)
    return manifest
