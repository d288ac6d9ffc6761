"""Localization and occlusion metrics: NME, CED, precision/recall sweeps, FPS."""

from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .shapes import DEFAULT_INDEX_MAP, LandmarkIndexMap

log = logging.getLogger(__name__)

REPORT_SCALE = 100.0  # NME is reported in units of 1e-2


class EvalError(ValueError):
    pass


@dataclass
class NmeResult:
    mean: float
    per_image: np.ndarray  # nan for excluded images
    excluded: list[int] = field(default_factory=list)


def nme(preds, truths, index_map: LandmarkIndexMap = DEFAULT_INDEX_MAP) -> NmeResult:
    """Mean over images of mean landmark error divided by inter-ocular distance.

    ``preds``/``truths`` are (N, L, 2) arrays or sequences of shapes. Images with
    zero inter-ocular distance are excluded with a warning.
    """
    p = _points(preds)
    g = _points(truths)
    if p.shape != g.shape:
        raise EvalError(f"prediction/truth shapes differ: {p.shape} vs {g.shape}")
    per = np.full(len(p), np.nan)
    excluded = []
    for i in range(len(p)):
        le, re = index_map.eye_centers(g[i])
        iod = float(np.linalg.norm(le - re))
        if iod == 0:
            log.warning("image %d: zero inter-ocular distance, excluded from NME", i)
            excluded.append(i)
            continue
        per[i] = float(np.linalg.norm(p[i] - g[i], axis=1).mean()) / iod
    valid = per[~np.isnan(per)]
    return NmeResult(float(valid.mean()) if len(valid) else float("nan"), per, excluded)


def _points(shapes) -> np.ndarray:
    if isinstance(shapes, np.ndarray):
        return shapes.astype(np.float64)
    items = list(shapes)
    if not items:
        return np.zeros((0, 0, 2))
    return np.stack([np.asarray(getattr(s, "points", s), dtype=np.float64) for s in items])


def ced_curve(errors, thresholds) -> np.ndarray:
    """Fraction of images whose error is at most each threshold."""
    e = np.asarray(errors, dtype=np.float64)
    e = e[~np.isnan(e)]
    t = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(t) < 0):
        raise EvalError("CED thresholds must be ascending")
    if len(e) == 0:
        return np.zeros(len(t))
    return np.searchsorted(np.sort(e), t, side="right") / len(e)


@dataclass
class PrResult:
    thresholds: np.ndarray
    precision: np.ndarray  # nan where nothing is predicted occluded
    recall: np.ndarray
    recall_at_precision: float
    target_precision: float
    flagged: bool  # no operating point reaches the target precision, or no positives
    pooling: str = "landmarks pooled over images"


def occlusion_pr(scores, truth, thresholds=None, target_precision: float = 0.8) -> PrResult:
    """Precision/recall of "score >= threshold means occluded", pooled over landmarks.

    Without explicit thresholds every distinct positive score is an operating
    point. The reported recall is the best one among operating points whose
    precision reaches ``target_precision`` (0 and flagged if none does).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(truth, dtype=bool).ravel()
    if s.shape != y.shape:
        raise EvalError("score and truth arities differ")
    if thresholds is None:
        thr = np.unique(s[s > 0])
    else:
        thr = np.asarray(thresholds, dtype=np.float64)
    n_pos = int(y.sum())
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    tp_cum = np.concatenate([[0], np.cumsum(y[order])])
    # number of scores >= t, via the descending sort
    n_pred = np.searchsorted(-s_sorted, -thr, side="right")
    tp = tp_cum[n_pred]
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(n_pred > 0, tp / np.maximum(n_pred, 1), np.nan)
        recall = tp / n_pos if n_pos else np.full(len(thr), np.nan)
    flagged = n_pos == 0
    ok = (n_pred > 0) & (precision >= target_precision - 1e-12)
    if n_pos and ok.any():
        best = float(recall[ok].max())
    else:
        best = 0.0
        flagged = True
    return PrResult(thr, precision, recall, best, target_precision, flagged)


@dataclass
class FpsResult:
    mean: float
    std: float
    runs: list[float]


def measure_fps(pipeline, dataset, repeats: int = 3, warmup: int = 1, clock=time.perf_counter) -> FpsResult:
    """Images per second of ``pipeline(item)`` over ``dataset``, repeated."""
    items = list(dataset)
    if not items:
        raise EvalError("cannot measure FPS on an empty dataset")
    for item in items[:warmup]:
        pipeline(item)
    runs = []
    for _ in range(max(1, repeats)):
        t0 = clock()
        for item in items:
            pipeline(item)
        dt = clock() - t0
        runs.append(len(items) / dt if dt > 0 else float("inf"))
    std = statistics.stdev(runs) if len(runs) > 1 else 0.0
    return FpsResult(statistics.fmean(runs), std, runs)


DEFAULT_CED_THRESHOLDS = np.round(np.linspace(0.0, 0.25, 51), 6)


@dataclass
class EvalSummary:
    nme: float
    n_images: int
    excluded: list[str]
    ced_thresholds: np.ndarray
    ced: np.ndarray
    pr: PrResult | None
    fps: FpsResult | None = None

    def to_json(self) -> dict:
        out = {
            "nme": _f(self.nme),
            "nme_x100": _f(self.nme * REPORT_SCALE),
            "n_images": self.n_images,
            "excluded": self.excluded,
            "ced_final": _f(self.ced[-1]) if len(self.ced) else None,
        }
        if self.pr is not None:
            out["occlusion"] = {
                "target_precision": self.pr.target_precision,
                "recall_at_precision": self.pr.recall_at_precision,
                "flagged": self.pr.flagged,
                "pooling": self.pr.pooling,
            }
        if self.fps is not None:
            out["fps"] = {"mean": self.fps.mean, "std": self.fps.std, "runs": self.fps.runs}
        return out


def _f(x):
    x = float(x)
    return x if np.isfinite(x) else None


def write_summary(summary: EvalSummary, out_dir, plot_svg: bool = False) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary.to_json(), indent=2, sort_keys=True) + "\n")
    write_ced_csv(out / "ced.csv", summary.ced_thresholds, summary.ced)
    if summary.pr is not None:
        write_pr_csv(out / "pr.csv", summary.pr)
    if plot_svg:
        from .plots import plot_ced, plot_pr

        plot_ced(summary.ced_thresholds, summary.ced, out / "ced.svg")
        if summary.pr is not None:
            plot_pr(summary.pr.recall, summary.pr.precision, out / "pr.svg")


def write_ced_csv(path, thresholds, fractions) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["nme_threshold", "fraction"])
        for t, f in zip(thresholds, fractions):
            w.writerow([repr(float(t)), repr(float(f))])


def write_pr_csv(path, pr: PrResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall"])
        for t, p, r in zip(pr.thresholds, pr.precision, pr.recall):
            w.writerow([repr(float(t)), "" if np.isnan(p) else repr(float(p)), "" if np.isnan(r) else repr(float(r))])


def read_curve_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: np.array([float(r[k]) if r[k] != "" else np.nan for r in rows]) for k in rows[0]}
