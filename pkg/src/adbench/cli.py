"""Command-line front end.

Commands: eval, build-cocoad, stats, synth, invad-demo, timing.
Exit codes are a stable contract: 0 success, 2 input/validation failure,
3 metric precondition failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import cocoad, metrics, synth, timing
from .datamodel import (
    DataModelError,
    ManifestError,
    TensorBlob,
    load_manifest,
    write_pgm,
    write_tensor_blob,
)
from .metrics import EvalConfig, ThresholdBandConfig

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_METRIC_PRECONDITION = 3


def _parse_band(text: str) -> ThresholdBandConfig:
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("band must look like start:end:step, e.g. 0.2:0.8:0.1")
    return ThresholdBandConfig(start=float(parts[0]), end=float(parts[1]), step=float(parts[2]))


def _parse_image_score(text: str) -> tuple[str, int]:
    if text == "max":
        return "max", 1
    if text.startswith("topk:"):
        return "topk", int(text.split(":", 1)[1])
    raise argparse.ArgumentTypeError("image-score must be 'max' or 'topk:K'")


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--band", type=_parse_band, default=ThresholdBandConfig(),
                   help="threshold band start:end:step (default 0.2:0.8:0.1)")
    p.add_argument("--fpr-cap", type=float, default=0.3,
                   help="AU-PRO false-positive-rate cap (default 0.3)")
    p.add_argument("--norm", choices=("category", "dataset"), default="category",
                   help="min-max normalization scope (default category)")
    p.add_argument("--image-score", type=_parse_image_score, default=("max", 1),
                   help="image score rule: max or topk:K (default max)")
    p.add_argument("--hist-bins", type=int, nargs="?", const=100_000, default=0,
                   help="use the histogram pixel path; default bin count 100000")
    p.add_argument("--pro-fpr", choices=("pooled", "mean_per_image"), default="pooled",
                   help="AU-PRO false-positive pooling across test images")
    p.add_argument("--workers", type=int, default=1, help="category worker processes")
    p.add_argument("--format", choices=("json", "md", "both"), default="both")


def _eval_config(args) -> EvalConfig:
    mode, k = args.image_score
    return EvalConfig(
        band=args.band,
        fpr_cap=args.fpr_cap,
        norm_scope=args.norm,
        image_score_mode=mode,
        image_score_k=k,
        hist_bins=args.hist_bins,
        pro_fpr_mode=args.pro_fpr,
    )


def cmd_eval(args) -> int:
    try:
        manifest = load_manifest(args.manifest)
    except ManifestError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    config = _eval_config(args)

    from .datamodel import load_category_eval_set
    from .metrics import score_bounds

    norm_bounds = None
    if config.norm_scope == "dataset":
        lo, hi = np.inf, -np.inf
        for desc in manifest.categories:
            b = score_bounds(load_category_eval_set(desc))
            lo, hi = min(lo, b[0]), max(hi, b[1])
        norm_bounds = (lo, hi)

    try:
        if args.workers > 1:
            with ProcessPoolExecutor(max_workers=args.workers) as pool:
                futures = [
                    pool.submit(metrics.evaluate_descriptor, desc, config, norm_bounds)
                    for desc in manifest.categories
                ]
                records = [f.result() for f in futures]  # manifest order
        else:
            records = [
                metrics.evaluate_descriptor(desc, config, norm_bounds)
                for desc in manifest.categories
            ]
    except DataModelError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_METRIC_PRECONDITION

    per_category = {d.name: r for d, r in zip(manifest.categories, records)}
    mean_record = metrics.aggregate_dataset(records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"dataset": manifest.name}
    doc.update(metrics.records_to_json_dict(per_category, mean_record))
    if args.format in ("json", "both"):
        (out / "report.json").write_text(json.dumps(doc, indent=1))
    if args.format in ("md", "both"):
        (out / "report.md").write_text(metrics.records_to_markdown(per_category, mean_record))
    print(metrics.records_to_markdown(per_category, mean_record))
    return EXIT_OK


def cmd_build_cocoad(args) -> int:
    root = Path(args.coco_root)
    train_json = Path(args.train_json) if args.train_json else root / "annotations" / "instances_train2017.json"
    val_json = Path(args.val_json) if args.val_json else root / "annotations" / "instances_val2017.json"
    for p in (train_json, val_json):
        if not p.is_file():
            print(f"error: annotation file not found: {p}", file=sys.stderr)
            return EXIT_VALIDATION
    try:
        train_set = cocoad.parse_coco(train_json)
        val_set = cocoad.parse_coco(val_json)
        assignments = cocoad.assign_splits(train_set.categories)
    except cocoad.CocoFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    wanted = {int(s) for s in args.splits.split(",")}
    results = []
    for assignment in assignments:
        if assignment.split_index not in wanted:
            continue
        res = cocoad.build_split(
            train_set,
            val_set,
            assignment,
            args.out,
            include_crowds=not args.exclude_crowds,
            per_class=args.per_class,
        )
        results.append(res)
        print(
            f"split{res.split_index}: train {res.train_count}, "
            f"test normal {res.test_normal_count}, test anomaly {res.test_anomaly_count}"
        )
    report = cocoad.deviation_report(results)
    report_path = Path(args.out) / "deviation_report.json"
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report, indent=1))
    if not report["matches"]:
        print(f"counts deviate from the reference; see {report_path}")
    return EXIT_OK


def cmd_stats(args) -> int:
    try:
        report = cocoad.dataset_statistics(args.manifest)
    except DataModelError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    text = json.dumps(report.to_json_dict(), indent=1)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    manifest = synth.write_fixture(
        args.out,
        seed=args.seed,
        predictor=args.predictor,
        categories=args.categories,
        images_per_category=args.images,
        size=args.size,
    )
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_invad_demo(args) -> int:
    from .invad import pipeline as invad_pipeline
    from .invad import toy

    cfg = invad_pipeline.PipelineConfig(
        use_style=not args.no_style, use_ssm=not args.no_ssm
    )
    data = toy.make_toy_dataset(args.seed, size=cfg.image_size)
    state, losses = toy.train_pipeline(data, cfg, seed=args.seed, steps=args.steps)
    maps = toy.score_test_set(data, state)
    eval_set = toy.build_eval_set(data, maps)
    record = metrics.evaluate_category(eval_set)

    out = Path(args.out)
    (out / "predictions").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for i, item in enumerate(eval_set.items):
        rel = f"predictions/{item.image_id}.adtb"
        arr = maps[i]
        write_tensor_blob(TensorBlob(dtype="f64", dims=arr.shape, data=arr), out / rel)
        rec = {
            "id": item.image_id,
            "label": "anomalous" if item.is_anomalous else "normal",
            "score_map": rel,
        }
        if item.mask is not None:
            mask_rel = f"masks/{item.image_id}.pgm"
            write_pgm(item.mask, out / mask_rel)
            rec["mask"] = mask_rel
        records.append(rec)
    (out / "manifest.json").write_text(
        json.dumps(
            {"name": f"invad-demo-seed{args.seed}",
             "categories": [{"name": "toy", "records": records}]},
            indent=1,
        )
    )
    (out / "metrics.json").write_text(
        json.dumps({"final_loss": losses[-1], "record": record.as_dict()}, indent=1)
    )
    print(json.dumps(record.as_dict(rounded=True), indent=1))
    return EXIT_OK


def cmd_timing(args) -> int:
    report = timing.measure(n_pixels=args.pixels, seed=args.seed, hist_bins=args.hist_bins or 100_000)
    text = json.dumps(report.to_json_dict(), indent=1)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adbench", description="anomaly-detection benchmark engine"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_seed(p):
        p.add_argument("--seed", type=int, default=0, help="seed for anything stochastic")

    p = sub.add_parser("eval", help="evaluate predictions against a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_eval_flags(p)
    add_seed(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("build-cocoad", help="build the four splits from COCO annotations")
    p.add_argument("--coco-root", required=True)
    p.add_argument("--train-json", default=None)
    p.add_argument("--val-json", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--splits", default="0,1,2,3")
    p.add_argument("--exclude-crowds", action="store_true",
                   help="drop iscrowd=1 annotations from anomaly masks")
    p.add_argument("--per-class", action="store_true",
                   help="one manifest category per anomaly class instead of one per split")
    p.set_defaults(func=cmd_build_cocoad)

    p = sub.add_parser("stats", help="dataset statistics for a built split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", help="write a synthetic evaluation fixture")
    p.add_argument("--out", required=True)
    p.add_argument("--predictor", choices=("perfect", "constant", "noisy"), default="noisy")
    p.add_argument("--categories", type=int, default=2)
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--size", type=int, default=32)
    add_seed(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("invad-demo", help="train the toy inversion pipeline and evaluate it")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--no-style", action="store_true")
    p.add_argument("--no-ssm", action="store_true")
    add_seed(p)
    p.set_defaults(func=cmd_invad_demo)

    p = sub.add_parser("timing", help="compare metric-family wall times")
    p.add_argument("--pixels", type=int, default=50_000_000)
    p.add_argument("--hist-bins", type=int, default=100_000)
    p.add_argument("--out", default=None)
    add_seed(p)
    p.set_defaults(func=cmd_timing)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not hasattr(args, "seed"):
        args.seed = 0
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
