"""Command-line entry point: ``ricpr <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .cascade import CascadeConfig, FernCascadeModel, train_cascade
from .dataset import DatasetRecord, load_image_gray, load_manifest, read_results, write_manifest, write_results
from .evaluation import (
    DEFAULT_CED_THRESHOLDS,
    EvalSummary,
    ced_curve,
    measure_fps,
    nme,
    occlusion_pr,
    read_curve_csv,
    write_summary,
)
from .fusion import FusionConfig
from .pipeline import FIDUCIAL_SOURCES, InferenceConfig, Localizer
from .pose import frontal_variants, load_mean_shape, select_frontal_shapes
from .shapes import N_LANDMARKS, AnnotatedShape, FaceBox
from .texture import Gallery, LbpConfig, build_gallery

log = logging.getLogger("ricpr")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _require(path, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{flag}: {p} does not exist")
    return p


def _out_dir(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _inference_config(args) -> InferenceConfig:
    try:
        return InferenceConfig(
            l_texture=args.l_texture,
            l_pose=args.l_pose,
            fusion=FusionConfig(zeta=args.zeta),
            fiducial_source=args.fiducials,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _write_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


# -- subcommands


def cmd_synth(args) -> int:
    from .synthetic import write_dataset

    out = _out_dir(args)
    path = write_dataset(out, args.n_train, args.n_test, args.seed, with_fiducials=not args.no_fiducials)
    print(path)
    return EXIT_OK


def _load_table(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    return np.loadtxt(path, delimiter=",", ndmin=2)


def cmd_convert(args) -> int:
    """RCPR-layout arrays (x[29], y[29], occlusion[29] per row) plus boxes to a manifest."""
    phis = _load_table(_require(args.phis, "--phis"))
    boxes = _load_table(_require(args.bboxes, "--bboxes"))
    if args.out is None:
        raise UsageError("--out (manifest path) is required")
    if phis.shape[1] != 3 * N_LANDMARKS:
        raise UsageError(f"--phis must have {3 * N_LANDMARKS} columns, got {phis.shape[1]}")
    if boxes.shape != (len(phis), 4):
        raise UsageError("--bboxes must have one [x, y, w, h] row per --phis row")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    records = []
    for i, row in enumerate(phis):
        pts = np.stack([row[:N_LANDMARKS], row[N_LANDMARKS : 2 * N_LANDMARKS]], axis=1)
        occ = row[2 * N_LANDMARKS :] > 0.5
        image = out.parent / args.image_pattern.format(i=i + args.index_base)
        records.append(
            DatasetRecord(str(i + args.index_base), image, FaceBox.from_list(boxes[i]), AnnotatedShape(pts, occ), None, args.split)
        )
    write_manifest(records, out)
    print(f"wrote {len(records)} records to {out}")
    return EXIT_OK


def cmd_gallery_build(args) -> int:
    manifest = load_manifest(_require(args.manifest, "--manifest")).split(args.split)
    if args.gallery is None:
        raise UsageError("--gallery (output path) is required")
    gallery, report = build_gallery(manifest, LbpConfig())
    gallery.save(args.gallery)
    print(f"gallery: {len(gallery)} faces, {len(report.errors)} skipped")
    for rid, msg in report.errors:
        print(f"  skipped {rid}: {msg}", file=sys.stderr)
    return EXIT_FAIL if report.errors else EXIT_OK


def cmd_train(args) -> int:
    manifest = load_manifest(_require(args.manifest, "--manifest"))
    if args.model is None:
        raise UsageError("--model (output path) is required")
    train = [r for r in manifest.split("train") if r.shape is not None]
    if not train:
        raise UsageError("manifest has no annotated train records")
    try:
        cfg = CascadeConfig(stages=args.stages, ferns=args.ferns, regressors=args.eta, depth=args.depth)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    images = [load_image_gray(r.image) for r in train]
    shapes = [r.shape for r in train]
    boxes = [r.box for r in train]

    def progress(stage, value):
        log.info("stage %d/%d mean NME %.4f", stage, cfg.stages, value)

    result = train_cascade(images, shapes, boxes, cfg, seed=args.seed, progress=progress)
    model = result.model

    mean29 = load_mean_shape()
    picks = select_frontal_shapes(shapes, boxes, args.pose_variants - 1, mean29, model.index_map)
    variants = [mean29] + (frontal_variants([shapes[i] for i in picks], mean29) if picks else [])
    model.pose_variants = np.stack([v.points for v in variants])
    model.pose_variant_ids = list(mean29.ids)
    model.meta = {"seed": args.seed, "n_train": len(train), "frontal_records": [train[i].record_id for i in picks]}
    model_path = Path(args.model)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    model.save(model_path)

    trace_path = Path(args.out) / "trace.csv" if args.out else model_path.with_name(model_path.stem + "_trace.csv")
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(trace_path, [{"stage": i, "mean_nme": float(v)} for i, v in enumerate(result.trace)])
    print(f"model: {model_path}  trace: {trace_path}  NME {result.trace[0]:.4f} -> {result.trace[-1]:.4f}")
    return EXIT_OK


# worker-process state for parallel inference
_WORKER: dict = {}


def _worker_init(model_path, gallery_path, config):
    gallery = Gallery.load(gallery_path) if gallery_path else None
    _WORKER["localizer"] = Localizer(FernCascadeModel.load(model_path), gallery, config)


def _worker_run(job):
    index, record = job
    try:
        rec, ms = _WORKER["localizer"].run_record(record, index)
        return index, rec, ms, None
    except Exception as exc:  # per-image failures are reported, not fatal
        return index, None, None, f"{type(exc).__name__}: {exc}"


def _run_inference(records, model_path, gallery_path, config, workers):
    jobs = list(enumerate(records))
    if workers <= 1:
        _worker_init(model_path, gallery_path, config)
        return [_worker_run(j) for j in jobs]
    with ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(model_path, gallery_path, config)) as ex:
        return list(ex.map(_worker_run, jobs, chunksize=4))


def _test_records(manifest):
    test = manifest.split("test")
    return list(test if len(test) else manifest)


def cmd_infer(args) -> int:
    manifest = load_manifest(_require(args.manifest, "--manifest"))
    model_path = _require(args.model, "--model")
    config = _inference_config(args)
    gallery_path = _require(args.gallery, "--gallery") if config.l_texture else None
    out = _out_dir(args)
    records = _test_records(manifest)
    outcomes = _run_inference(records, model_path, gallery_path, config, args.workers)
    results, timing, failures = [], [], []
    for index, rec, ms, err in outcomes:
        rid = records[index].record_id
        if err is not None:
            log.error("record %s failed: %s", rid, err)
            failures.append({"id": rid, "error": err})
            continue
        results.append(rec)
        timing.append({"id": rid, "ms": ms})
    write_results(results, out / "results.jsonl")
    # timings vary run to run, so they stay out of the results file
    with open(out / "timing.jsonl", "w") as fh:
        for t in timing:
            fh.write(json.dumps(t) + "\n")
    branches = {}
    for r in results:
        branches[r.fusion["branch"]] = branches.get(r.fusion["branch"], 0) + 1
    summary = {"n_records": len(records), "n_results": len(results), "branches": branches, "failures": failures}
    (out / "infer_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"{len(results)}/{len(records)} records localized; branches {branches}")
    return EXIT_FAIL if failures else EXIT_OK


def cmd_evaluate(args) -> int:
    manifest = load_manifest(_require(args.manifest, "--manifest"))
    out = _out_dir(args)
    results_path = _require(args.results or out / "results.jsonl", "--results")
    by_id = {r.record_id: r for r in read_results(results_path)}
    truth = {r.record_id: r for r in _test_records(manifest) if r.shape is not None}
    ids = [rid for rid in truth if rid in by_id]
    missing = [rid for rid in truth if rid not in by_id]
    if not ids:
        raise UsageError("no results match annotated manifest records")
    preds = np.stack([by_id[i].points for i in ids])
    gts = np.stack([truth[i].shape.points for i in ids])
    res = nme(preds, gts)
    ced = ced_curve(res.per_image, DEFAULT_CED_THRESHOLDS)
    pr = occlusion_pr(
        np.stack([by_id[i].occlusion_scores for i in ids]),
        np.stack([truth[i].shape.occluded for i in ids]),
    )
    fps = None
    if args.fps_repeats > 0:
        model = FernCascadeModel.load(_require(args.model, "--model"))
        config = _inference_config(args)
        gallery = Gallery.load(_require(args.gallery, "--gallery")) if config.l_texture else None
        loc = Localizer(model, gallery, config)
        items = [(i, truth[rid], load_image_gray(truth[rid].image)) for i, rid in enumerate(ids)]
        fps = measure_fps(lambda it: loc.run_record(it[1], it[0], image=it[2]), items, repeats=args.fps_repeats)
    excluded = [ids[i] for i in res.excluded] + missing
    summary = EvalSummary(res.mean, len(ids), excluded, DEFAULT_CED_THRESHOLDS, ced, pr, fps)
    write_summary(summary, out, plot_svg=args.plot_svg)
    print(json.dumps(summary.to_json(), sort_keys=True))
    return EXIT_OK


def cmd_init_analyze(args) -> int:
    from .analysis import analyze_record, goodness_summary, rank_summary

    manifest = load_manifest(_require(args.manifest, "--manifest"))
    model = FernCascadeModel.load(_require(args.model, "--model"))
    gallery = Gallery.load(_require(args.gallery, "--gallery"))
    config = _inference_config(args)
    out = _out_dir(args)
    zetas = sorted({float(z) for z in args.zeta_sweep.split(",")} | {config.fusion.zeta}) if args.zeta_sweep else [config.fusion.zeta]
    if args.ranks > len(gallery):
        raise UsageError(f"--ranks {args.ranks} exceeds the gallery size {len(gallery)}")
    loc = Localizer(model, gallery, config)
    rank_rows, image_rows, failures = [], [], []
    for index, rec in enumerate(_test_records(manifest)):
        if rec.shape is None:
            continue
        try:
            rows, img = analyze_record(
                loc, rec, load_image_gray(rec.image), args.ranks, zetas, np.random.default_rng([config.seed, index])
            )
        except Exception as exc:
            log.error("record %s failed: %s", rec.record_id, exc)
            failures.append(rec.record_id)
            continue
        rank_rows.extend(rows)
        image_rows.append(img)
    _write_csv(out / "init_ranks.csv", [vars(r) for r in rank_rows])
    _write_csv(out / "init_rank_summary.csv", rank_summary(rank_rows))
    _write_csv(
        out / "init_goodness.csv",
        [
            {"record_id": i.record_id, "checkpoint_variance": i.checkpoint_variance, "fused_nme": i.fused_nme,
             **{f"good_zeta_{z:g}": int(i.good[z]) for z in zetas}}
            for i in image_rows
        ],
    )
    _write_csv(out / "init_goodness_summary.csv", goodness_summary(image_rows, zetas))
    print(f"analyzed {len(image_rows)} images, {len(failures)} failures")
    return EXIT_FAIL if failures else EXIT_OK


def cmd_plot(args) -> int:
    from .plots import plot_ced, plot_pr

    out = _out_dir(args)
    ced = _require(out / "ced.csv", "--out/ced.csv")
    c = read_curve_csv(ced)
    plot_ced(c["nme_threshold"], c["fraction"], out / "ced.svg")
    if (out / "pr.csv").exists():
        p = read_curve_csv(out / "pr.csv")
        if p:
            plot_pr(p["recall"], p["precision"], out / "pr.svg")
    return EXIT_OK


# -- argument parsing


def _common(p, *names):
    if "manifest" in names:
        p.add_argument("--manifest", help="JSON-lines dataset manifest")
    if "model" in names:
        p.add_argument("--model", help="cascade model file")
    if "gallery" in names:
        p.add_argument("--gallery", help="texture gallery file")
    if "out" in names:
        p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def _inference_flags(p):
    p.add_argument("--l-texture", type=int, default=5, help="texture-correlated initial shapes")
    p.add_argument("--l-pose", type=int, default=5, help="pose-correlated initial shapes")
    p.add_argument("--zeta", type=float, default=0.08, help="fusion variance threshold")
    p.add_argument("--fiducials", choices=FIDUCIAL_SOURCES, default="manifest", help="where five-point fiducials come from")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ricpr", description="Occlusion-robust facial landmark localization")
    ap.add_argument("--version", action="version", version=f"ricpr {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic occluded-face dataset")
    _common(p, "out")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--no-fiducials", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", help="RCPR-layout landmark arrays to a manifest")
    _common(p)
    p.add_argument("--phis", help="CSV or .npy, one row of x[29] y[29] occ[29] per face")
    p.add_argument("--bboxes", help="CSV or .npy, one [x, y, w, h] row per face")
    p.add_argument("--image-pattern", default="images/{i:04d}.png", help="image path per index, relative to the manifest")
    p.add_argument("--index-base", type=int, default=1)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--out", help="manifest path to write")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("gallery-build", help="precompute texture descriptors of the train split")
    _common(p, "manifest", "gallery")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.set_defaults(func=cmd_gallery_build)

    p = sub.add_parser("train", help="train the cascade")
    _common(p, "manifest", "model", "gallery", "out")
    d = CascadeConfig()
    p.add_argument("--stages", type=int, default=d.stages)
    p.add_argument("--ferns", type=int, default=d.ferns)
    p.add_argument("--eta", type=int, default=d.regressors, help="zone regressors per fern")
    p.add_argument("--depth", type=int, default=d.depth)
    p.add_argument("--pose-variants", type=int, default=10, help="3D shapes stored for pose initialization")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="localize landmarks on the test split")
    _common(p, "manifest", "model", "gallery", "out")
    _inference_flags(p)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="NME, CED and occlusion precision/recall of a results file")
    _common(p, "manifest", "model", "gallery", "out")
    _inference_flags(p)
    p.add_argument("--results", help="results JSON-lines (default: <out>/results.jsonl)")
    p.add_argument("--fps-repeats", type=int, default=0, help="also time the pipeline this many times")
    p.add_argument("--plot-svg", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("init-analyze", help="correlation rank vs error and early agreement report")
    _common(p, "manifest", "model", "gallery", "out")
    _inference_flags(p)
    p.add_argument("--ranks", type=int, default=10)
    p.add_argument("--zeta-sweep", help="comma-separated extra thresholds for the good/bad counts")
    p.set_defaults(func=cmd_init_analyze)

    p = sub.add_parser("plot", help="SVG plots from the CSVs in --out")
    _common(p, "out")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ricpr {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"ricpr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
