"""End-to-end localization of one face: initial shapes, cascade, fusion."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .cascade import FernCascadeModel
from .dataset import DatasetRecord, ResultRecord, load_image_gray
from .fusion import POSE, TEXTURE, FusionConfig, FusionReport, PredictionSet, fuse
from .pose import MeanShape3D, PoseError, PoseInitializer, load_mean_shape
from .shapes import AnnotatedShape, FaceBox, FiducialFive, fiducials_from_ground_truth
from .texture import Gallery, InitCandidate, select_texture_init

log = logging.getLogger(__name__)

FIDUCIAL_SOURCES = ("manifest", "ground-truth", "auto")


@dataclass(frozen=True)
class InferenceConfig:
    l_texture: int = 5
    l_pose: int = 5
    fusion: FusionConfig = FusionConfig()
    fiducial_source: str = "manifest"  # "auto": manifest, else derived from ground truth
    seed: int = 0

    def __post_init__(self):
        if self.l_texture < 0 or self.l_pose < 0 or self.l_texture + self.l_pose == 0:
            raise ValueError("need a positive total number of initial shapes")
        if self.fiducial_source not in FIDUCIAL_SOURCES:
            raise ValueError(f"fiducial source must be one of {FIDUCIAL_SOURCES}")


@dataclass
class Localization:
    shape: AnnotatedShape
    scores: np.ndarray  # (29,) fused occlusion scores
    report: FusionReport
    texture: list[InitCandidate] = field(default_factory=list)
    texture_preds: list[AnnotatedShape] = field(default_factory=list)
    pose_preds: list[AnnotatedShape] = field(default_factory=list)
    checkpoint: np.ndarray | None = None  # (L, 29, 2), texture inits first
    elapsed_ms: float = 0.0


def model_pose_variants(model: FernCascadeModel) -> list[MeanShape3D]:
    if model.pose_variants is None or len(model.pose_variants) == 0:
        return [load_mean_shape()]
    ids = tuple(model.pose_variant_ids) if len(model.pose_variant_ids) == model.pose_variants.shape[1] else ()
    return [MeanShape3D(np.array(v), ids) for v in model.pose_variants]


class Localizer:
    def __init__(self, model: FernCascadeModel, gallery: Gallery | None, config: InferenceConfig = InferenceConfig()):
        self.model = model
        self.gallery = gallery
        self.config = config
        variants = model_pose_variants(model)
        # more pose inits than variants: cycle, the random occlusion flags still differ
        if config.l_pose > len(variants):
            variants = [variants[i % len(variants)] for i in range(config.l_pose)]
        self.pose_init = PoseInitializer(variants, index_map=model.index_map)
        if config.l_texture and gallery is None:
            raise ValueError("texture initialization needs a gallery")
        if gallery is not None and config.l_texture > len(gallery):
            raise ValueError(f"l_texture={config.l_texture} exceeds the gallery size {len(gallery)}")

    def fiducials_for(self, record: DatasetRecord) -> FiducialFive | None:
        src = self.config.fiducial_source
        if src in ("manifest", "auto") and record.fiducials is not None:
            return record.fiducials
        if src in ("ground-truth", "auto") and record.shape is not None:
            return fiducials_from_ground_truth(record.shape, self.model.index_map)
        return None

    def localize(self, image, box: FaceBox, fiducials: FiducialFive | None, rng: np.random.Generator) -> Localization:
        t0 = time.perf_counter()
        cfg = self.config
        warnings = []
        cands = select_texture_init(image, box, self.gallery, cfg.l_texture) if cfg.l_texture else []
        tex_inits = [c.transferred(box) for c in cands]
        pose_inits = []
        if cfg.l_pose:
            if fiducials is None:
                warnings.append("no fiducials available; pose initialization skipped")
            else:
                try:
                    pose_inits = self.pose_init(box, fiducials, cfg.l_pose, rng)
                except PoseError as exc:
                    warnings.append(f"pose initialization failed: {exc}")
        for w in warnings:
            log.warning(w)
        inits = tex_inits + pose_inits
        if not inits:
            raise ValueError("no initial shapes could be produced")
        out = self.model.predict(image, box, inits)
        preds = out.shapes()
        nt = len(tex_inits)
        tex_preds, pose_preds = preds[:nt], preds[nt:]
        fused, report = fuse(PredictionSet(tex_preds, pose_preds, box.diagonal), cfg.fusion)
        report.warnings.extend(warnings)
        offset = {TEXTURE: 0, POSE: nt}
        rows = [offset[f] + i for f, i in report.members]
        scores = out.scores[rows].mean(axis=0)
        elapsed = (time.perf_counter() - t0) * 1000.0
        return Localization(fused, scores, report, cands, tex_preds, pose_preds, out.checkpoint, elapsed)

    def run_record(self, record: DatasetRecord, index: int, image=None) -> tuple[ResultRecord, float]:
        """Result for manifest position ``index`` (its RNG stream depends only on seed and index)."""
        rng = np.random.default_rng([self.config.seed, index])
        if image is None:
            image = load_image_gray(record.image)
        loc = self.localize(image, record.box, self.fiducials_for(record), rng)
        rec = ResultRecord(
            record.record_id,
            loc.shape.points,
            loc.shape.occluded,
            np.clip(loc.scores, 0.0, 1.0),
            loc.report.to_json(),
        )
        return rec, loc.elapsed_ms
