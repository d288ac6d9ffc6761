"""Initialization analysis: correlation-distance rank against downstream error,
and early agreement of predictions at the checkpoint stage."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .evaluation import nme
from .fusion import prediction_variance
from .pipeline import Localizer
from .shapes import AnnotatedShape
from .texture import select_texture_init


@dataclass
class RankRow:
    record_id: str
    rank: int  # 1 = most correlated gallery face
    distance: float
    init_nme: float
    checkpoint_nme: float
    final_nme: float


@dataclass
class ImageRow:
    record_id: str
    checkpoint_variance: float
    fused_nme: float
    good: dict[float, bool] = field(default_factory=dict)


def analyze_record(localizer: Localizer, record, image, ranks: int, zetas, rng) -> tuple[list[RankRow], ImageRow]:
    """Per-rank errors of single texture initializations plus the image's early-agreement row."""
    if record.shape is None:
        raise ValueError(f"record {record.record_id} has no ground truth")
    truth = record.shape
    model = localizer.model
    idx = model.index_map
    cands = select_texture_init(image, record.box, localizer.gallery, ranks)
    inits = [c.transferred(record.box) for c in cands]
    out = model.predict(image, record.box, inits)
    rows = []
    for r, (c, s) in enumerate(zip(cands, inits), start=1):
        rows.append(
            RankRow(
                record.record_id,
                r,
                c.distance,
                nme([s], [truth], idx).mean,
                nme(out.checkpoint[r - 1 : r], truth.points[None], idx).mean,
                nme(out.points[r - 1 : r], truth.points[None], idx).mean,
            )
        )
    loc = localizer.localize(image, record.box, localizer.fiducials_for(record), rng)
    partial = [AnnotatedShape(p, np.zeros(len(p), dtype=bool)) for p in loc.checkpoint]
    v = prediction_variance(partial, record.box.diagonal)
    img = ImageRow(record.record_id, v, nme([loc.shape], [truth], idx).mean, {float(z): bool(v < z) for z in zetas})
    return rows, img


def rank_summary(rows: list[RankRow]) -> list[dict]:
    out = []
    for r in sorted({row.rank for row in rows}):
        sel = [row for row in rows if row.rank == r]
        out.append(
            {
                "rank": r,
                "n": len(sel),
                "mean_distance": float(np.mean([s.distance for s in sel])),
                "mean_init_nme": float(np.nanmean([s.init_nme for s in sel])),
                "mean_final_nme": float(np.nanmean([s.final_nme for s in sel])),
            }
        )
    return out


def goodness_summary(images: list[ImageRow], zetas) -> list[dict]:
    out = []
    for z in zetas:
        z = float(z)
        good = [i.fused_nme for i in images if i.good[z]]
        bad = [i.fused_nme for i in images if not i.good[z]]
        out.append(
            {
                "zeta": z,
                "n_good": len(good),
                "n_bad": len(bad),
                "mean_nme_good": float(np.mean(good)) if good else float("nan"),
                "mean_nme_bad": float(np.mean(bad)) if bad else float("nan"),
            }
        )
    return out
