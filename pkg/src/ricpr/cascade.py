"""Occlusion-aware two-level cascaded fern regression.

Shapes live in box-normalized coordinates (the face box spans [-1, 1]^2).
At every stage a pool of shape-indexed points is sampled; each point is a
landmark anchor plus an offset expressed in the mean-shape frame, carried into
the current shape's frame by the mean-to-current similarity. Features are
differences of two pooled pixel intensities.

A stage holds K ferns. Every fern holds eta zone regressors, each restricted
to pool points anchored in one of the 9 face zones; their outputs are
combined by a vote weighted by how un-occluded each zone currently is. Stage
updates are regressed in the mean-shape frame. Visibility ferns regress the
per-landmark occlusion score alongside.

2D similarities are handled as complex multipliers: a point set ``c`` is
approximated by ``z * m + mean(c)`` for the centered mean shape ``m``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import container
from .shapes import (
    DEFAULT_INDEX_MAP,
    N_LANDMARKS,
    AnnotatedShape,
    FaceBox,
    LandmarkIndexMap,
)

log = logging.getLogger(__name__)

N_ZONES = 9
MODEL_MAGIC = b"RICPRMDL"
MODEL_VERSION = 1


class CascadeError(ValueError):
    pass


@dataclass(frozen=True)
class CascadeConfig:
    stages: int = 100  # T
    ferns: int = 15  # K, per stage
    regressors: int = 4  # eta, zone regressors per fern
    depth: int = 5  # D
    pool_size: int = 400
    shrinkage: float = 1000.0  # lambda
    vote_epsilon: float = 0.05
    feature_radius: float = 0.25  # mean-shape-normalized units
    occlusion_ferns: int = 5  # visibility ferns per stage
    augment: int = 10  # initial shapes per training sample
    occlusion_threshold: float = 0.5
    checkpoint_fraction: float = 0.1

    def __post_init__(self):
        if self.stages < 0 or self.ferns < 1 or self.depth < 1 or self.pool_size < 2 * N_ZONES:
            raise CascadeError(f"invalid cascade config {self}")
        if not 1 <= self.regressors <= N_ZONES:
            raise CascadeError(f"eta must be in [1, {N_ZONES}]")
        if self.augment < 1 or self.shrinkage < 0 or self.vote_epsilon < 0:
            raise CascadeError(f"invalid cascade config {self}")

    @property
    def checkpoint_stage(self) -> int:
        """Stage count after which intermediate shapes are recorded."""
        if self.stages == 0:
            return 0
        return max(1, int(math.ceil(self.checkpoint_fraction * self.stages)))


# ---------------------------------------------------------------- geometry


def _as_complex(points: np.ndarray) -> np.ndarray:
    return points[..., 0] + 1j * points[..., 1]


def _as_real(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-1)


def similarity_to(mean_c: np.ndarray, cur: np.ndarray) -> np.ndarray:
    """Complex scale-rotation taking the centered mean shape onto each current shape.

    ``mean_c`` is (L,) complex and centered; ``cur`` is (..., L) complex.
    """
    cc = cur - cur.mean(axis=-1, keepdims=True)
    # row-wise reduction, not matmul: results must not depend on the batch size
    return (cc * np.conj(mean_c)).sum(axis=-1) / np.vdot(mean_c, mean_c).real


def zone_index(normalized: np.ndarray) -> np.ndarray:
    """Row-major 3x3 zone of box-normalized points (outside points clamp)."""
    cols = np.clip(np.floor((normalized[..., 0] + 1.0) * 1.5), 0, 2).astype(np.int64)
    rows = np.clip(np.floor((normalized[..., 1] + 1.0) * 1.5), 0, 2).astype(np.int64)
    return rows * 3 + cols


def zone_of(point, box: FaceBox) -> int:
    return int(zone_index(box.to_normalized(np.asarray(point, dtype=np.float64))))


def zone_occlusion_fractions(zones: np.ndarray, occluded: np.ndarray) -> np.ndarray:
    """(..., 9) fraction of each zone's landmarks flagged occluded; empty zones give 0."""
    onehot = zones[..., None] == np.arange(N_ZONES)
    count = onehot.sum(axis=-2)
    occ = (onehot & occluded[..., None]).sum(axis=-2)
    return np.where(count > 0, occ / np.maximum(count, 1), 0.0)


def estimate_zone_occlusion(shape: AnnotatedShape, box: FaceBox) -> np.ndarray:
    return zone_occlusion_fractions(zone_index(box.to_normalized(shape.points)), shape.occluded)


def vote_weights(zone_occ: np.ndarray, zones: np.ndarray, epsilon: float) -> np.ndarray:
    """Weights ``(1 - occ(zone_i)) + epsilon`` normalized over the last axis.

    ``zone_occ`` is (..., 9), ``zones`` the (eta,) zone ids; result is (..., eta).
    """
    w = 1.0 - zone_occ[..., zones] + epsilon
    total = w.sum(axis=-1, keepdims=True)
    # epsilon == 0 with every zone fully occluded: fall back to uniform
    w = np.where(total > 0, w, 1.0)
    return w / w.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- pixels


class ImageBank:
    """Grayscale rasters of any size behind one flat buffer for vectorized lookups."""

    def __init__(self, images):
        imgs = [np.asarray(im, dtype=np.float32) for im in images]
        if not imgs:
            raise CascadeError("no images")
        self.heights = np.array([im.shape[0] for im in imgs], dtype=np.int64)
        self.widths = np.array([im.shape[1] for im in imgs], dtype=np.int64)
        sizes = self.heights * self.widths
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self.flat = np.concatenate([im.ravel() for im in imgs])

    def sample(self, image_idx: np.ndarray, xy: np.ndarray) -> np.ndarray:
        """Nearest-pixel values at pixel coordinates ``xy`` (..., 2), border-clamped.

        ``image_idx`` broadcasts against ``xy[..., 0]``.
        """
        image_idx = np.broadcast_to(image_idx, xy.shape[:-1])
        w = self.widths[image_idx]
        h = self.heights[image_idx]
        xi = np.clip(np.rint(xy[..., 0]).astype(np.int64), 0, w - 1)
        yi = np.clip(np.rint(xy[..., 1]).astype(np.int64), 0, h - 1)
        return self.flat[self.offsets[image_idx] + yi * w + xi].astype(np.float64)


def _box_arrays(boxes) -> tuple[np.ndarray, np.ndarray]:
    b = np.array([bx.to_list() if isinstance(bx, FaceBox) else bx for bx in boxes], dtype=np.float64)
    centers = b[:, :2] + b[:, 2:] / 2.0
    halves = b[:, 2:] / 2.0
    return centers, halves


def pool_pixels(bank, image_idx, cur_n, zc, centers, halves, anchors, offsets_c):
    """Pixel values at pool points for N shapes. cur_n (N,L) complex normalized."""
    pos = cur_n[:, anchors] + zc[:, None] * offsets_c[None, :]
    xy = _as_real(pos) * halves[:, None, :] + centers[:, None, :]
    return bank.sample(image_idx[:, None], xy)


@dataclass(frozen=True)
class ShapeIndexedFeature:
    """Difference of the pixels at two (anchor landmark, mean-frame offset) points."""

    anchor_a: int
    offset_a: tuple[float, float]
    anchor_b: int
    offset_b: tuple[float, float]


def extract_features(image, shape_points, box: FaceBox, features, mean_shape: np.ndarray) -> np.ndarray:
    """Feature values for one image.

    ``shape_points`` are pixel coordinates; ``mean_shape`` is the model's mean
    shape in box-normalized coordinates and fixes the offset frame.
    """
    pts = np.asarray(shape_points.points if isinstance(shape_points, AnnotatedShape) else shape_points)
    mean_c = _as_complex(np.asarray(mean_shape, dtype=np.float64))
    mean_c = mean_c - mean_c.mean()
    cur = _as_complex(box.to_normalized(pts))[None]
    zc = similarity_to(mean_c, cur)
    feats = list(features)
    anchors = np.array([f.anchor_a for f in feats] + [f.anchor_b for f in feats], dtype=np.int64)
    if np.any(anchors < 0) or np.any(anchors >= len(pts)):
        raise CascadeError("feature anchor out of range")
    offs = np.array([f.offset_a for f in feats] + [f.offset_b for f in feats], dtype=np.float64).reshape(-1, 2)
    centers, halves = _box_arrays([box])
    vals = pool_pixels(ImageBank([image]), np.zeros(1, dtype=np.int64), cur, zc, centers, halves, anchors, _as_complex(offs))[0]
    n = len(feats)
    return vals[:n] - vals[n:]


# ---------------------------------------------------------------- model


@dataclass(frozen=True)
class ZoneRegressor:
    zone: int
    pairs: np.ndarray  # (D, 2) pool indices
    thresholds: np.ndarray  # (D,)
    bins: np.ndarray  # (2**D, 29, 2) mean-frame updates

    def bin_of(self, pool_values: np.ndarray) -> np.ndarray:
        return fern_bins(pool_values, self.pairs[None], self.thresholds[None])[..., 0]


def fern_bins(pool_values: np.ndarray, pairs: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Bin index per sample and fern.

    pool_values (N, F); pairs (R, D, 2); thresholds (R, D) -> (N, R).
    """
    diff = pool_values[:, pairs[..., 0]] - pool_values[:, pairs[..., 1]]
    bits = (diff > thresholds[None]).astype(np.int64)
    return (bits << np.arange(pairs.shape[1])).sum(axis=-1)


def weighted_update(zone_occ: np.ndarray, regressors: list[ZoneRegressor], pool_values: np.ndarray, epsilon: float = 0.05) -> np.ndarray:
    """Occlusion-weighted vote of the eta zone regressors of one fern.

    ``zone_occ`` (9,) or (N, 9); ``pool_values`` (F,) or (N, F). Returns the
    mean-frame delta, (29, 2) or (N, 29, 2).
    """
    single = np.ndim(pool_values) == 1
    pv = np.atleast_2d(pool_values)
    zo = np.atleast_2d(zone_occ)
    zones = np.array([r.zone for r in regressors])
    w = vote_weights(zo, zones, epsilon)
    out = np.zeros((len(pv), N_LANDMARKS, 2))
    for i, reg in enumerate(regressors):
        out += w[:, i, None, None] * reg.bins[reg.bin_of(pv)]
    return out[0] if single else out


@dataclass
class FernCascadeModel:
    config: CascadeConfig
    mean_shape: np.ndarray  # (29, 2) box-normalized
    pool_anchor: np.ndarray  # (T, F) int
    pool_offset: np.ndarray  # (T, F, 2) mean-frame offsets
    fern_zone: np.ndarray  # (T, K, eta) int
    fern_pairs: np.ndarray  # (T, K, eta, D, 2) int
    fern_thresh: np.ndarray  # (T, K, eta, D)
    fern_bins: np.ndarray  # (T, K, eta, 2**D, 29, 2)
    vis_pairs: np.ndarray  # (T, V, D, 2) int
    vis_thresh: np.ndarray  # (T, V, D)
    vis_bins: np.ndarray  # (T, V, 2**D, 29)
    index_map: LandmarkIndexMap = DEFAULT_INDEX_MAP
    pose_variants: np.ndarray | None = None  # (P, 29, 3) 3D variants, first is the mean
    pose_variant_ids: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def stages(self) -> int:
        return self.pool_anchor.shape[0]

    @classmethod
    def identity(cls, mean_shape: np.ndarray, config: CascadeConfig | None = None) -> FernCascadeModel:
        """A model with no stages: predictions equal the initial shapes."""
        cfg = config or CascadeConfig(stages=0)
        if cfg.stages != 0:
            cfg = CascadeConfig(**{**asdict(cfg), "stages": 0})
        return _empty_model(cfg, np.asarray(mean_shape, dtype=np.float64))

    def regressors(self, stage: int, fern: int) -> list[ZoneRegressor]:
        return [
            ZoneRegressor(
                int(self.fern_zone[stage, fern, i]),
                self.fern_pairs[stage, fern, i],
                self.fern_thresh[stage, fern, i],
                self.fern_bins[stage, fern, i],
            )
            for i in range(self.fern_zone.shape[2])
        ]

    # -- inference

    def predict(self, image, box: FaceBox, initials) -> CascadeOutput:
        """Run every initial shape through all stages (vectorized over initials)."""
        inits = list(initials)
        if not inits:
            raise CascadeError("no initial shapes")
        pts = []
        occ = []
        for s in inits:
            if isinstance(s, AnnotatedShape):
                pts.append(s.points)
                occ.append(s.occluded)
            else:
                raise CascadeError("initial shapes must be AnnotatedShape instances")
        pts = np.stack(pts)
        if pts.shape[1] != N_LANDMARKS:
            raise CascadeError(f"initial shape arity {pts.shape[1]} != {N_LANDMARKS}")
        bank = ImageBank([image])
        n = len(inits)
        cur = _as_complex(box.to_normalized(pts))
        scores = np.stack(occ).astype(np.float64)
        centers, halves = _box_arrays([box] * n)
        state = _run_stages(self, bank, np.zeros(n, dtype=np.int64), cur, scores, centers, halves)
        final = box.from_normalized(_as_real(state.cur))
        checkpoint = box.from_normalized(_as_real(state.checkpoint))
        return CascadeOutput(final, np.clip(state.scores, 0.0, 1.0), state.scores >= self.config.occlusion_threshold, checkpoint)

    # -- persistence

    def to_bytes(self) -> bytes:
        meta = {
            "config": asdict(self.config),
            "index_map": self.index_map.to_dict(),
            "n_landmarks": N_LANDMARKS,
            "pose_variant_ids": list(self.pose_variant_ids),
            "extra": self.meta,
        }
        arrays = {
            "mean_shape": self.mean_shape.astype("<f8"),
            "pool_anchor": self.pool_anchor.astype("<i4"),
            "pool_offset": self.pool_offset.astype("<f8"),
            "fern_zone": self.fern_zone.astype("<i4"),
            "fern_pairs": self.fern_pairs.astype("<i4"),
            "fern_thresh": self.fern_thresh.astype("<f8"),
            "fern_bins": self.fern_bins.astype("<f8"),
            "vis_pairs": self.vis_pairs.astype("<i4"),
            "vis_thresh": self.vis_thresh.astype("<f8"),
            "vis_bins": self.vis_bins.astype("<f8"),
        }
        if self.pose_variants is not None:
            arrays["pose_variants"] = self.pose_variants.astype("<f8")
        return container.dumps(MODEL_MAGIC, MODEL_VERSION, meta, arrays)

    @classmethod
    def from_bytes(cls, data: bytes) -> FernCascadeModel:
        _, meta, a = container.loads(data, MODEL_MAGIC, MODEL_VERSION)
        if meta.get("n_landmarks") != N_LANDMARKS:
            raise container.ContainerError(f"model was trained for {meta.get('n_landmarks')} landmarks")
        return cls(
            config=CascadeConfig(**meta["config"]),
            mean_shape=a["mean_shape"],
            pool_anchor=a["pool_anchor"].astype(np.int64),
            pool_offset=a["pool_offset"],
            fern_zone=a["fern_zone"].astype(np.int64),
            fern_pairs=a["fern_pairs"].astype(np.int64),
            fern_thresh=a["fern_thresh"],
            fern_bins=a["fern_bins"],
            vis_pairs=a["vis_pairs"].astype(np.int64),
            vis_thresh=a["vis_thresh"],
            vis_bins=a["vis_bins"],
            index_map=LandmarkIndexMap.from_dict(meta["index_map"]),
            pose_variants=a.get("pose_variants"),
            pose_variant_ids=list(meta.get("pose_variant_ids", [])),
            meta=meta.get("extra", {}),
        )

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> FernCascadeModel:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass
class CascadeOutput:
    points: np.ndarray  # (L, 29, 2) pixels
    scores: np.ndarray  # (L, 29) occlusion scores in [0, 1]
    occluded: np.ndarray  # (L, 29) bool
    checkpoint: np.ndarray  # (L, 29, 2) shapes after the checkpoint stage

    def shapes(self) -> list[AnnotatedShape]:
        return [AnnotatedShape(p, o) for p, o in zip(self.points, self.occluded)]

    def checkpoint_shapes(self) -> list[AnnotatedShape]:
        return [AnnotatedShape(p, o) for p, o in zip(self.checkpoint, self.occluded)]


def _empty_model(cfg: CascadeConfig, mean_shape: np.ndarray) -> FernCascadeModel:
    t, k, e, d, f, v = cfg.stages, cfg.ferns, cfg.regressors, cfg.depth, cfg.pool_size, cfg.occlusion_ferns
    return FernCascadeModel(
        config=cfg,
        mean_shape=mean_shape,
        pool_anchor=np.zeros((t, f), dtype=np.int64),
        pool_offset=np.zeros((t, f, 2)),
        fern_zone=np.zeros((t, k, e), dtype=np.int64),
        fern_pairs=np.zeros((t, k, e, d, 2), dtype=np.int64),
        fern_thresh=np.zeros((t, k, e, d)),
        fern_bins=np.zeros((t, k, e, 2**d, N_LANDMARKS, 2)),
        vis_pairs=np.zeros((t, v, d, 2), dtype=np.int64),
        vis_thresh=np.zeros((t, v, d)),
        vis_bins=np.zeros((t, v, 2**d, N_LANDMARKS)),
    )


@dataclass
class _State:
    cur: np.ndarray  # (N, 29) complex normalized
    scores: np.ndarray  # (N, 29)
    checkpoint: np.ndarray


def _stage_features(model, t, bank, image_idx, cur, centers, halves, mean_c):
    zc = similarity_to(mean_c, cur)
    pv = pool_pixels(bank, image_idx, cur, zc, centers, halves, model.pool_anchor[t], _as_complex(model.pool_offset[t]))
    return zc, pv


def _apply_stage(model, t, pv, cur, scores):
    cfg = model.config
    n = len(cur)
    occ = scores >= cfg.occlusion_threshold
    zo = zone_occlusion_fractions(zone_index(_as_real(cur)), occ)
    k, e = model.fern_zone.shape[1:]
    bins = fern_bins(pv, model.fern_pairs[t].reshape(k * e, cfg.depth, 2), model.fern_thresh[t].reshape(k * e, cfg.depth)).reshape(n, k, e)
    w = vote_weights(zo, model.fern_zone[t], cfg.vote_epsilon)  # (N, K, eta)
    delta = np.zeros((n, N_LANDMARKS, 2))
    table = model.fern_bins[t]  # (K, eta, B, 29, 2)
    for kk in range(k):
        for i in range(e):
            delta += w[:, kk, i, None, None] * table[kk, i][bins[:, kk, i]]
    vis_delta = np.zeros((n, N_LANDMARKS))
    nv = model.vis_pairs.shape[1]
    if nv:
        vb = fern_bins(pv, model.vis_pairs[t], model.vis_thresh[t])
        for j in range(nv):
            vis_delta += model.vis_bins[t, j][vb[:, j]]
    return _as_complex(delta), vis_delta


def _run_stages(model, bank, image_idx, cur, scores, centers, halves) -> _State:
    mean_c = _as_complex(model.mean_shape)
    mean_c = mean_c - mean_c.mean()
    checkpoint = cur.copy()
    cp = model.config.checkpoint_stage
    for t in range(model.stages):
        zc, pv = _stage_features(model, t, bank, image_idx, cur, centers, halves, mean_c)
        delta, vis_delta = _apply_stage(model, t, pv, cur, scores)
        cur = cur + zc[:, None] * delta
        scores = scores + vis_delta
        if t + 1 == cp:
            checkpoint = cur.copy()
    return _State(cur, scores, checkpoint)


def run_cascade(model: FernCascadeModel, image, box: FaceBox, initial: AnnotatedShape) -> AnnotatedShape:
    if not isinstance(initial, AnnotatedShape) or initial.points.shape != (N_LANDMARKS, 2):
        raise CascadeError("initial shape must be a 29-point AnnotatedShape")
    return model.predict(image, box, [initial]).shapes()[0]


# ---------------------------------------------------------------- training

InitProvider = Callable[[int, int, np.random.Generator], list]


def jittered_mean(mean_shape: np.ndarray, rng: np.random.Generator, box: FaceBox) -> AnnotatedShape:
    """Mean shape under a small random similarity, mapped into ``box``."""
    ang = rng.uniform(-0.15, 0.15)
    s = rng.uniform(0.9, 1.1)
    t = rng.uniform(-0.1, 0.1, size=2)
    c = mean_shape.mean(axis=0)
    rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    pts = s * (mean_shape - c) @ rot.T + c + t
    return AnnotatedShape(box.from_normalized(pts), np.zeros(N_LANDMARKS, dtype=bool))


class RandomShapeInit:
    """Training shapes of other samples, re-expressed in the target face box.

    When fewer distinct donors exist than requested, the rest are jittered
    copies of the mean shape.
    """

    def __init__(self, shapes, boxes, mean_shape: np.ndarray):
        self.norm = np.stack([b.to_normalized(s.points) for s, b in zip(shapes, boxes)])
        self.occ = np.stack([s.occluded for s in shapes])
        self.boxes = list(boxes)
        self.mean_shape = mean_shape

    def __call__(self, i: int, count: int, rng: np.random.Generator) -> list[AnnotatedShape]:
        donors = np.delete(np.arange(len(self.norm)), i)
        take = rng.permutation(donors)[:count]
        box = self.boxes[i]
        out = [AnnotatedShape(box.from_normalized(self.norm[j]), self.occ[j]) for j in take]
        while len(out) < count:
            out.append(jittered_mean(self.mean_shape, rng, box))
        return out


@dataclass
class TrainResult:
    model: FernCascadeModel
    trace: np.ndarray  # (T + 1,) mean NME over augmented samples before each stage and at the end


def _select_pair(pc_sub, cov_sub, var_sub, proj):
    """Pool-pair (i, j) whose difference best correlates with ``proj``."""
    y = proj - proj.mean()
    vy = y @ y / len(y)
    cy = pc_sub.T @ y / len(y)
    num = cy[:, None] - cy[None, :]
    den2 = var_sub[:, None] + var_sub[None, :] - 2.0 * cov_sub
    valid = den2 > 1e-12
    np.fill_diagonal(valid, False)
    if vy <= 0 or not valid.any():
        return None
    score = np.full(num.shape, -np.inf)
    score[valid] = num[valid] / np.sqrt(den2[valid] * vy)
    flat = int(np.argmax(score))
    return divmod(flat, num.shape[1])


def _fit_bins(bins: np.ndarray, target: np.ndarray, n_bins: int, shrinkage: float) -> np.ndarray:
    """Per-bin residual sum / (count + lambda)."""
    flat = target.reshape(len(target), -1)
    onehot = np.zeros((len(bins), n_bins))
    onehot[np.arange(len(bins)), bins] = 1.0
    sums = onehot.T @ flat
    counts = onehot.sum(axis=0)
    out = sums / (counts + shrinkage)[:, None]
    out[counts == 0] = 0.0
    return out.reshape((n_bins,) + target.shape[1:])


def _train_fern(rng, pv, pc, cov, var, cand, target, depth, shrinkage):
    """Select features for one fern on candidate pool indices and fit its bins."""
    d_out = target.reshape(len(target), -1)
    pairs = np.zeros((depth, 2), dtype=np.int64)
    thresh = np.zeros(depth)
    for d in range(depth):
        direction = rng.normal(size=d_out.shape[1])
        proj = d_out @ direction
        pick = _select_pair(pc[:, cand], cov[np.ix_(cand, cand)], var[cand], proj)
        if pick is None:
            a, b = rng.choice(len(cand), size=2, replace=False)
        else:
            a, b = pick
        pairs[d] = (cand[a], cand[b])
        diff = pv[:, cand[a]] - pv[:, cand[b]]
        thresh[d] = float(np.quantile(diff, rng.uniform(0.25, 0.75)))
    bins = fern_bins(pv, pairs[None], thresh[None])[:, 0]
    return pairs, thresh, bins, _fit_bins(bins, target, 2**depth, shrinkage)


def _zone_landmarks(mean_shape: np.ndarray) -> list[np.ndarray]:
    """Anchor landmarks per zone, empty zones borrowing from the nearest non-empty one."""
    zones = zone_index(mean_shape)
    centers = np.array([[(c - 1) * 2.0 / 3.0, (r - 1) * 2.0 / 3.0] for r in range(3) for c in range(3)])
    out = []
    for z in range(N_ZONES):
        members = np.flatnonzero(zones == z)
        if len(members) == 0:
            d = np.linalg.norm(centers[zones] - centers[z], axis=1)
            nearest_zone = zones[int(np.argmin(d))]
            members = np.flatnonzero(zones == nearest_zone)
        out.append(members)
    return out


def _sample_pool(rng, zone_lm, pool_size, radius):
    per = np.full(N_ZONES, pool_size // N_ZONES)
    per[: pool_size % N_ZONES] += 1
    anchors, offsets, pzone = [], [], []
    for z in range(N_ZONES):
        m = per[z]
        anchors.append(rng.choice(zone_lm[z], size=m))
        r = radius * np.sqrt(rng.random(m))
        th = rng.uniform(0, 2 * np.pi, m)
        offsets.append(np.stack([r * np.cos(th), r * np.sin(th)], axis=1))
        pzone.append(np.full(m, z))
    return np.concatenate(anchors), np.concatenate(offsets), np.concatenate(pzone)


def mean_nme_normalized(cur_px, gt_px, index_map: LandmarkIndexMap) -> np.ndarray:
    """Per-sample NME of pixel shapes (N, 29, 2) against ground truth."""
    le = gt_px[:, list(index_map.left_eye)].mean(axis=1)
    re = gt_px[:, list(index_map.right_eye)].mean(axis=1)
    iod = np.linalg.norm(le - re, axis=1)
    err = np.linalg.norm(cur_px - gt_px, axis=2).mean(axis=1)
    return err / np.where(iod > 0, iod, np.nan)


def train_cascade(
    images,
    shapes,
    boxes,
    config: CascadeConfig = CascadeConfig(),
    seed: int = 0,
    init_provider: InitProvider | None = None,
    index_map: LandmarkIndexMap = DEFAULT_INDEX_MAP,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Fit the cascade on ground-truth ``shapes`` (pixel coordinates) and ``boxes``.

    Every sample is replicated ``config.augment`` times with initial shapes from
    ``init_provider(sample_index, count, rng)``; by default these are the
    shapes of other training samples.
    """
    images = list(images)
    shapes = list(shapes)
    boxes = list(boxes)
    if not shapes:
        raise CascadeError("empty training set")
    if not (len(images) == len(shapes) == len(boxes)):
        raise CascadeError("images, shapes and boxes must align")
    cfg = config
    rng = np.random.default_rng(seed)

    gt_norm = np.stack([b.to_normalized(s.points) for s, b in zip(shapes, boxes)])
    mean_shape = gt_norm.mean(axis=0)
    provider = init_provider or RandomShapeInit(shapes, boxes, mean_shape)

    img_idx, init_pts, init_occ = [], [], []
    for i in range(len(shapes)):
        for s in provider(i, cfg.augment, rng):
            img_idx.append(i)
            init_pts.append(boxes[i].to_normalized(s.points))
            init_occ.append(s.occluded)
    img_idx = np.array(img_idx, dtype=np.int64)
    n = len(img_idx)
    cur = _as_complex(np.stack(init_pts))
    scores = np.stack(init_occ).astype(np.float64)
    gt_c = _as_complex(gt_norm[img_idx])
    gt_occ = np.stack([s.occluded for s in shapes]).astype(np.float64)[img_idx]
    gt_px = np.stack([s.points for s in shapes])[img_idx]
    centers, halves = _box_arrays(boxes)
    centers, halves = centers[img_idx], halves[img_idx]
    bank = ImageBank(images)

    def trace_value(c):
        px = _as_real(c) * halves[:, None, :] + centers[:, None, :]
        return float(np.nanmean(mean_nme_normalized(px, gt_px, index_map)))

    model = _empty_model(cfg, mean_shape)
    model.index_map = index_map
    mean_c = _as_complex(mean_shape)
    mean_c = mean_c - mean_c.mean()
    zone_lm = _zone_landmarks(mean_shape)
    trace = [trace_value(cur)]
    n_bins = 2**cfg.depth

    for t in range(cfg.stages):
        anchors, offsets, pzone = _sample_pool(rng, zone_lm, cfg.pool_size, cfg.feature_radius)
        model.pool_anchor[t] = anchors
        model.pool_offset[t] = offsets
        zc, pv = _stage_features(model, t, bank, img_idx, cur, centers, halves, mean_c)
        pc = pv - pv.mean(axis=0)
        cov = pc.T @ pc / n
        var = np.diag(cov).copy()
        zone_cands = [np.flatnonzero(pzone == z) for z in range(N_ZONES)]

        with np.errstate(divide="ignore", invalid="ignore"):
            resid = _as_real((gt_c - cur) / zc[:, None])  # mean frame
        if not np.all(np.isfinite(resid)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(resid), axis=(1, 2)))[0])
            raise CascadeError(f"non-finite regression target for sample {int(img_idx[bad])}")
        occ_now = scores >= cfg.occlusion_threshold
        zo = zone_occlusion_fractions(zone_index(_as_real(cur)), occ_now)
        stage_delta = np.zeros((n, N_LANDMARKS, 2))

        for k in range(cfg.ferns):
            zones = rng.choice(N_ZONES, size=cfg.regressors, replace=False)
            w = vote_weights(zo, zones, cfg.vote_epsilon)  # (N, eta)
            out = np.zeros_like(stage_delta)
            for i, z in enumerate(zones):
                pairs, thresh, bins, table = _train_fern(
                    rng, pv, pc, cov, var, zone_cands[z], resid, cfg.depth, cfg.shrinkage
                )
                model.fern_zone[t, k, i] = z
                model.fern_pairs[t, k, i] = pairs
                model.fern_thresh[t, k, i] = thresh
                model.fern_bins[t, k, i] = table
                out += w[:, i, None, None] * table[bins]
            resid = resid - out
            stage_delta += out

        occ_resid = gt_occ - scores
        vis_delta = np.zeros((n, N_LANDMARKS))
        all_cands = np.arange(cfg.pool_size)
        for j in range(cfg.occlusion_ferns):
            pairs, thresh, bins, table = _train_fern(
                rng, pv, pc, cov, var, all_cands, occ_resid, cfg.depth, cfg.shrinkage
            )
            model.vis_pairs[t, j] = pairs
            model.vis_thresh[t, j] = thresh
            model.vis_bins[t, j] = table
            upd = table[bins]
            occ_resid = occ_resid - upd
            vis_delta += upd

        cur = cur + zc[:, None] * _as_complex(stage_delta)
        scores = scores + vis_delta
        trace.append(trace_value(cur))
        if progress is not None:
            progress(t + 1, trace[-1])
        log.debug("stage %d/%d: mean NME %.4f", t + 1, cfg.stages, trace[-1])

    return TrainResult(model, np.array(trace))

