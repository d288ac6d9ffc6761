"""Texture-correlated initialization.

A face crop is resampled to a fixed analysis resolution, labelled with the
uniform circular LBP operator, cut into non-overlapping blocks and summarized
as a blocks x labels histogram matrix. Training faces whose matrices are most
Pearson-correlated with the test face donate their shapes as initial shapes.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Protocol

import numpy as np

from . import container
from .dataset import DatasetManifest, ImageLoadError, load_image_gray
from .shapes import AnnotatedShape, FaceBox, ShapeError, normalize_to_box

log = logging.getLogger(__name__)

ANALYSIS_SIZE = 128
MIN_BOX_SIDE = 8.0

GALLERY_MAGIC = b"RICPRGAL"
GALLERY_VERSION = 1


class TextureError(ValueError):
    pass


@dataclass(frozen=True)
class LbpConfig:
    points: int = 8  # P, samples on the circle
    radius: float = 1.0  # Q, pixels
    uniform: bool = True
    blocks_per_side: int = 8
    analysis_size: int = ANALYSIS_SIZE

    def __post_init__(self):
        if self.points < 4:
            raise TextureError("LBP needs at least 4 sampling points")
        if self.points > 24:
            raise TextureError("LBP with more than 24 sampling points is not supported")
        if not self.radius > 0:
            raise TextureError("LBP radius must be positive")
        if self.blocks_per_side < 1 or self.analysis_size % self.blocks_per_side:
            raise TextureError("analysis size must be divisible by blocks_per_side")

    @property
    def n_blocks(self) -> int:
        return self.blocks_per_side**2

    @property
    def n_labels(self) -> int:
        return len(np.unique(label_table(self.points, self.uniform)))

    @property
    def margin(self) -> int:
        return int(np.ceil(self.radius)) + 1


@lru_cache(maxsize=None)
def label_table(points: int, uniform: bool = True) -> np.ndarray:
    """Map every P-bit pattern to its histogram bin.

    Uniform patterns (at most two circular 0/1 transitions) get their own bins
    in ascending pattern order; every other pattern shares the last bin.
    """
    codes = np.arange(2**points, dtype=np.int64)
    if not uniform:
        table = codes.copy()
    else:
        rotated = (codes >> 1) | ((codes & 1) << (points - 1))
        diff = codes ^ rotated
        transitions = np.array([bin(int(d)).count("1") for d in diff])
        is_uniform = transitions <= 2
        table = np.full(codes.shape, int(is_uniform.sum()), dtype=np.int64)
        table[is_uniform] = np.arange(int(is_uniform.sum()))
    table.setflags(write=False)
    return table


def circle_offsets(points: int, radius: float) -> np.ndarray:
    """(P, 2) neighbor offsets as (dy, dx); near-integer values are snapped."""
    ang = 2.0 * np.pi * np.arange(points) / points
    off = np.stack([-radius * np.sin(ang), radius * np.cos(ang)], axis=1)
    snapped = np.round(off)
    near = np.abs(off - snapped) < 1e-9
    off[near] = snapped[near]
    return off


def _bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    # lerp form keeps constant regions exactly constant
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    r1 = np.minimum(r0 + 1, img.shape[0] - 1)
    c1 = np.minimum(c0 + 1, img.shape[1] - 1)
    a = img[r0, c0]
    b = img[r0, c1]
    c = img[r1, c0]
    d = img[r1, c1]
    top = a + fc * (b - a)
    bot = c + fc * (d - c)
    return top + fr * (bot - top)


def lbp_codes(img: np.ndarray, rows: np.ndarray, cols: np.ndarray, points: int, radius: float) -> np.ndarray:
    """Raw P-bit LBP codes at integer pixel positions (neighbor >= center sets the bit)."""
    img = np.asarray(img, dtype=np.float64)
    center = img[rows, cols]
    code = np.zeros(np.shape(rows), dtype=np.int64)
    for k, (dy, dx) in enumerate(circle_offsets(points, radius)):
        nb = _bilinear(img, rows + dy, cols + dx)
        code |= (nb >= center).astype(np.int64) << k
    return code


def lbp_label(image: np.ndarray, center, config: LbpConfig = LbpConfig()) -> int:
    """Histogram bin of the pixel at ``center = (x, y)``."""
    img = np.asarray(image, dtype=np.float64)
    x, y = int(center[0]), int(center[1])
    r = config.radius
    if x - r < 0 or y - r < 0 or x + r > img.shape[1] - 1 or y + r > img.shape[0] - 1:
        raise TextureError(f"center ({x}, {y}) closer than {r} px to the image edge")
    code = lbp_codes(img, np.array([y]), np.array([x]), config.points, config.radius)[0]
    return int(label_table(config.points, config.uniform)[code])


def _clamp_box(shape: tuple[int, int], box: FaceBox) -> FaceBox:
    h, w = shape
    x0 = max(box.x, 0.0)
    y0 = max(box.y, 0.0)
    x1 = min(box.x + box.width, float(w))
    y1 = min(box.y + box.height, float(h))
    if x1 <= x0 or y1 <= y0:
        raise TextureError(f"face box {box.to_list()} lies outside the {w}x{h} image")
    if x1 - x0 < MIN_BOX_SIDE or y1 - y0 < MIN_BOX_SIDE:
        raise TextureError(f"face box {box.to_list()} is smaller than {MIN_BOX_SIDE} px after clamping")
    return FaceBox(x0, y0, x1 - x0, y1 - y0)


def analysis_image(image: np.ndarray, box: FaceBox, config: LbpConfig = LbpConfig()) -> np.ndarray:
    """Box crop resampled to ``analysis_size`` square, with a ``margin`` border.

    The box is first clamped to the raster. Border pixels come from outside the
    box where available and are edge-clamped otherwise, so every analysis pixel
    receives a label.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise TextureError("expected a grayscale raster")
    b = _clamp_box(img.shape, box)
    n, m = config.analysis_size, config.margin
    idx = np.arange(-m, n + m, dtype=np.float64) + 0.5
    ys = np.clip(b.y + idx * b.height / n - 0.5, 0, img.shape[0] - 1)
    xs = np.clip(b.x + idx * b.width / n - 0.5, 0, img.shape[1] - 1)
    rr, cc = np.meshgrid(ys, xs, indexing="ij")
    return _bilinear(img, rr, cc)


def histogram_matrix(image: np.ndarray, box: FaceBox, config: LbpConfig = LbpConfig()) -> np.ndarray:
    """(blocks, labels) int64 matrix of per-block LBP label counts."""
    a = analysis_image(image, box, config)
    n, m = config.analysis_size, config.margin
    rows, cols = np.meshgrid(np.arange(m, m + n), np.arange(m, m + n), indexing="ij")
    labels = label_table(config.points, config.uniform)[lbp_codes(a, rows, cols, config.points, config.radius)]
    bs = n // config.blocks_per_side
    k = config.blocks_per_side
    block_id = (np.arange(n) // bs)[:, None] * k + (np.arange(n) // bs)[None, :]
    n_labels = config.n_labels
    flat = block_id.ravel() * n_labels + labels.ravel()
    return np.bincount(flat, minlength=k * k * n_labels).reshape(k * k, n_labels)


class Descriptor(Protocol):
    """Anything mapping (image, box) to a fixed-size 2D matrix can back a gallery."""

    name: str

    def __call__(self, image: np.ndarray, box: FaceBox) -> np.ndarray: ...

    def config_dict(self) -> dict: ...


@dataclass(frozen=True)
class LbpDescriptor:
    config: LbpConfig = field(default_factory=LbpConfig)
    name: str = "lbp"

    def __call__(self, image, box):
        return histogram_matrix(image, box, self.config)

    def config_dict(self) -> dict:
        return asdict(self.config)


def pearson_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Correlation distance ``1 - rho`` over all entries of two matrices."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise TextureError(f"histogram matrices differ in shape: {a.shape} vs {b.shape}")
    x = a.ravel() - a.mean()
    y = b.ravel() - b.mean()
    nx = np.sqrt(x @ x)
    ny = np.sqrt(y @ y)
    if nx == 0 or ny == 0:
        raise TextureError("zero-variance histogram matrix (degenerate crop)")
    rho = float((x / nx) @ (y / ny))
    return float(np.clip(1.0 - rho, 0.0, 2.0))


def _unit_rows(mats: np.ndarray) -> np.ndarray:
    flat = mats.reshape(len(mats), -1).astype(np.float64)
    flat = flat - flat.mean(axis=1, keepdims=True)
    norms = np.sqrt((flat**2).sum(axis=1, keepdims=True))
    if np.any(norms == 0):
        raise TextureError("zero-variance histogram matrix in gallery")
    return flat / norms


@dataclass(frozen=True)
class InitCandidate:
    shape: AnnotatedShape  # in the training image's frame
    box: FaceBox  # training face box
    distance: float
    source_index: int

    def transferred(self, to_box: FaceBox) -> AnnotatedShape:
        return normalize_to_box(self.shape, self.box, to_box)


@dataclass
class Gallery:
    """Precomputed descriptor matrices plus shapes of the training faces."""

    matrices: np.ndarray  # (G, m, n)
    points: np.ndarray  # (G, 29, 2) image coordinates
    occluded: np.ndarray  # (G, 29) bool
    boxes: np.ndarray  # (G, 4)
    record_ids: list[str]
    descriptor: str = "lbp"
    descriptor_config: dict = field(default_factory=lambda: asdict(LbpConfig()))
    _unit: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.record_ids)

    def shape(self, i: int) -> AnnotatedShape:
        return AnnotatedShape(self.points[i], self.occluded[i])

    def box(self, i: int) -> FaceBox:
        return FaceBox.from_list(self.boxes[i])

    def lbp_config(self) -> LbpConfig:
        if self.descriptor != "lbp":
            raise TextureError(f"gallery descriptor is {self.descriptor!r}, not lbp")
        return LbpConfig(**self.descriptor_config)

    def distances(self, matrix: np.ndarray) -> np.ndarray:
        if len(self) == 0:
            raise TextureError("empty gallery")
        if matrix.shape != self.matrices.shape[1:]:
            raise TextureError(f"descriptor shape {matrix.shape} does not match gallery {self.matrices.shape[1:]}")
        if self._unit is None:
            self._unit = _unit_rows(self.matrices)
        q = _unit_rows(matrix[None])[0]
        return np.clip(1.0 - self._unit @ q, 0.0, 2.0)

    def save(self, path) -> None:
        meta = {
            "descriptor": self.descriptor,
            "descriptor_config": self.descriptor_config,
            "record_ids": list(self.record_ids),
        }
        container.write(
            path,
            GALLERY_MAGIC,
            GALLERY_VERSION,
            meta,
            {
                "matrices": self.matrices.astype("<i4"),
                "points": self.points.astype("<f8"),
                "occluded": self.occluded.astype(bool),
                "boxes": self.boxes.astype("<f8"),
            },
        )

    @classmethod
    def load(cls, path) -> Gallery:
        _, meta, arr = container.read(path, GALLERY_MAGIC, GALLERY_VERSION)
        return cls(
            matrices=arr["matrices"].astype(np.int64),
            points=arr["points"],
            occluded=arr["occluded"].astype(bool),
            boxes=arr["boxes"],
            record_ids=list(meta["record_ids"]),
            descriptor=meta["descriptor"],
            descriptor_config=meta["descriptor_config"],
        )


def select_texture_init(
    test_image: np.ndarray,
    test_box: FaceBox,
    gallery: Gallery,
    l: int,
    descriptor: Descriptor | None = None,
) -> list[InitCandidate]:
    """The ``l`` gallery faces with the smallest correlation distance, ascending.

    Ties are broken by the lower gallery index.
    """
    if len(gallery) == 0:
        raise TextureError("empty gallery")
    if not 1 <= l <= len(gallery):
        raise TextureError(f"need 1 <= l <= {len(gallery)}, got {l}")
    descriptor = descriptor or LbpDescriptor(gallery.lbp_config())
    d = gallery.distances(descriptor(test_image, test_box))
    order = np.lexsort((np.arange(len(d)), d))[:l]
    return [
        InitCandidate(gallery.shape(int(i)), gallery.box(int(i)), float(d[i]), int(i))
        for i in order
    ]


@dataclass
class GalleryBuildReport:
    errors: list[tuple[str, str]] = field(default_factory=list)


def build_gallery(
    manifest: DatasetManifest,
    config: LbpConfig = LbpConfig(),
    descriptor: Descriptor | None = None,
) -> tuple[Gallery, GalleryBuildReport]:
    """One descriptor matrix per record with ground truth, in manifest order.

    Records whose image cannot be read (or whose crop is degenerate) are
    skipped and listed in the report.
    """
    descriptor = descriptor or LbpDescriptor(config)
    report = GalleryBuildReport()
    mats, pts, occ, boxes, ids = [], [], [], [], []
    for rec in manifest:
        if rec.shape is None:
            report.errors.append((rec.record_id, "record has no ground-truth landmarks"))
            continue
        try:
            img = load_image_gray(rec.image)
            mat = descriptor(img, rec.box)
        except (ImageLoadError, TextureError, ShapeError) as exc:
            log.warning("gallery: skipping record %s: %s", rec.record_id, exc)
            report.errors.append((rec.record_id, str(exc)))
            continue
        mats.append(mat)
        pts.append(rec.shape.points)
        occ.append(rec.shape.occluded)
        boxes.append(rec.box.to_list())
        ids.append(rec.record_id)
    if mats:
        matrices = np.stack(mats).astype(np.int64)
    else:
        matrices = np.zeros((0, config.n_blocks, config.n_labels), dtype=np.int64)
    gallery = Gallery(
        matrices=matrices,
        points=np.array(pts, dtype=np.float64).reshape(-1, 29, 2),
        occluded=np.array(occ, dtype=bool).reshape(-1, 29),
        boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
        record_ids=ids,
        descriptor=descriptor.name,
        descriptor_config=descriptor.config_dict(),
    )
    return gallery, report
