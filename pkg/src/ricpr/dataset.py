"""Dataset manifests, image loading and result persistence.

Manifest format: JSON lines, one face per line::

    {"image": "img/0001.png", "box": [x, y, w, h],
     "landmarks": [[x, y], ... 29 pairs], "occluded": [false, ... 29 flags],
     "fiducials": [[x, y], ... 5 pairs], "split": "train", "id": "0001"}

``landmarks``/``occluded`` may be omitted at inference, ``fiducials`` is
optional, ``id`` defaults to the 0-based record index. Image paths are
resolved relative to the manifest's directory. All coordinates are in the full
image frame. Blank lines are ignored.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .shapes import N_LANDMARKS, AnnotatedShape, FaceBox, FiducialFive, ShapeError

SPLITS = ("train", "test")


class ManifestError(ValueError):
    def __init__(self, line: int, field_name: str, message: str):
        self.line = line
        self.field = field_name
        super().__init__(f"line {line}: field {field_name!r}: {message}")


class ImageLoadError(IOError):
    pass


class ResultsError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetRecord:
    record_id: str
    image: Path
    box: FaceBox
    shape: AnnotatedShape | None = None
    fiducials: FiducialFive | None = None
    split: str = "test"


@dataclass
class DatasetManifest:
    records: list[DatasetRecord] = field(default_factory=list)
    path: Path | None = None

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def split(self, name: str) -> DatasetManifest:
        return DatasetManifest([r for r in self.records if r.split == name], self.path)


def _parse_record(obj, lineno: int, index: int, base: Path) -> DatasetRecord:
    if not isinstance(obj, dict):
        raise ManifestError(lineno, "<row>", "expected a JSON object")
    if "image" not in obj or not isinstance(obj["image"], str):
        raise ManifestError(lineno, "image", "missing or not a string")
    try:
        box_vals = obj["box"]
        if not isinstance(box_vals, list) or len(box_vals) != 4:
            raise ManifestError(lineno, "box", "expected [x, y, w, h]")
        box = FaceBox.from_list(box_vals)
    except KeyError:
        raise ManifestError(lineno, "box", "missing") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ManifestError):
            raise
        raise ManifestError(lineno, "box", str(exc)) from None

    shape = None
    if obj.get("landmarks") is not None:
        pts = obj["landmarks"]
        if not isinstance(pts, list) or len(pts) != N_LANDMARKS:
            n = len(pts) if isinstance(pts, list) else "non-list"
            raise ManifestError(lineno, "landmarks", f"expected {N_LANDMARKS} points, got {n}")
        occ = obj.get("occluded", [False] * N_LANDMARKS)
        if not isinstance(occ, list) or len(occ) != N_LANDMARKS:
            raise ManifestError(lineno, "occluded", f"expected {N_LANDMARKS} flags")
        if not all(isinstance(o, (bool, int)) for o in occ):
            raise ManifestError(lineno, "occluded", "flags must be booleans")
        try:
            shape = AnnotatedShape(np.array(pts, dtype=np.float64), np.array(occ, dtype=bool))
        except (ShapeError, TypeError, ValueError) as exc:
            raise ManifestError(lineno, "landmarks", str(exc)) from None

    fid = None
    if obj.get("fiducials") is not None:
        try:
            fid = FiducialFive(np.array(obj["fiducials"], dtype=np.float64))
        except (ShapeError, TypeError, ValueError) as exc:
            raise ManifestError(lineno, "fiducials", str(exc)) from None

    split = obj.get("split", "test")
    if split not in SPLITS:
        raise ManifestError(lineno, "split", f"expected one of {SPLITS}, got {split!r}")
    rid = obj.get("id", str(index))
    if not isinstance(rid, (str, int)):
        raise ManifestError(lineno, "id", "expected string")
    return DatasetRecord(str(rid), base / obj["image"], box, shape, fid, split)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    base = path.parent
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(lineno, "<row>", f"invalid JSON: {exc.msg}") from None
            records.append(_parse_record(obj, lineno, len(records), base))
    return DatasetManifest(records, path)


def record_to_json(rec: DatasetRecord, base: Path | None = None) -> dict:
    image = rec.image
    if base is not None:
        try:
            image = rec.image.relative_to(base)
        except ValueError:
            pass
    out: dict = {"id": rec.record_id, "image": image.as_posix(), "box": rec.box.to_list()}
    if rec.shape is not None:
        out["landmarks"] = rec.shape.points.tolist()
        out["occluded"] = [bool(o) for o in rec.shape.occluded]
    if rec.fiducials is not None:
        out["fiducials"] = rec.fiducials.points.tolist()
    out["split"] = rec.split
    return out


def write_manifest(records, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_json(rec, path.parent)) + "\n")


def luma601(rgb: np.ndarray) -> np.ndarray:
    """8-bit BT.601 luma of an RGB array."""
    rgb = np.asarray(rgb, dtype=np.float64)
    y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.rint(y), 0, 255).astype(np.uint8)


def load_image_gray(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode == "L":
                return np.asarray(im, dtype=np.uint8).copy()
            if im.mode in ("I;16", "I", "F"):
                raise ImageLoadError(f"{path}: unsupported image mode {im.mode}")
            return luma601(np.asarray(im.convert("RGB")))
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        if isinstance(exc, ImageLoadError):
            raise
        raise ImageLoadError(f"{path}: {exc}") from exc


def save_image_gray(path, image: np.ndarray) -> None:
    Image.fromarray(np.clip(np.rint(image), 0, 255).astype(np.uint8), mode="L").save(path)


@dataclass
class ResultRecord:
    record_id: str
    points: np.ndarray
    occluded: np.ndarray
    occlusion_scores: np.ndarray
    fusion: dict = field(default_factory=dict)
    timing_ms: float | None = None

    @property
    def shape(self) -> AnnotatedShape:
        return AnnotatedShape(self.points, self.occluded)

    def to_json(self) -> dict:
        pts = np.asarray(self.points, dtype=np.float64)
        scores = np.asarray(self.occlusion_scores, dtype=np.float64)
        if pts.shape != (N_LANDMARKS, 2) or not np.all(np.isfinite(pts)):
            raise ResultsError(f"record {self.record_id}: landmarks must be {N_LANDMARKS} finite points")
        if scores.shape != (N_LANDMARKS,) or not np.all(np.isfinite(scores)):
            raise ResultsError(f"record {self.record_id}: occlusion scores must be {N_LANDMARKS} finite values")
        if np.any(scores < 0) or np.any(scores > 1):
            raise ResultsError(f"record {self.record_id}: occlusion scores outside [0, 1]")
        out = {
            "id": self.record_id,
            "landmarks": pts.tolist(),
            "occluded": [bool(o) for o in np.asarray(self.occluded)],
            "occlusion_scores": scores.tolist(),
            "fusion": self.fusion,
        }
        if self.timing_ms is not None:
            out["timing_ms"] = float(self.timing_ms)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> ResultRecord:
        return cls(
            record_id=str(obj["id"]),
            points=np.array(obj["landmarks"], dtype=np.float64),
            occluded=np.array(obj["occluded"], dtype=bool),
            occlusion_scores=np.array(obj["occlusion_scores"], dtype=np.float64),
            fusion=obj.get("fusion", {}),
            timing_ms=obj.get("timing_ms"),
        )


def write_results(results, path) -> None:
    # validate everything before touching the file
    lines = [json.dumps(r.to_json(), allow_nan=False) + "\n" for r in results]
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.writelines(lines)


def read_results(path) -> list[ResultRecord]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(ResultRecord.from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ResultsError(f"line {lineno}: {exc}") from None
    return out


def finite_or_none(x: float) -> float | None:
    return None if x is None or not math.isfinite(x) else float(x)
