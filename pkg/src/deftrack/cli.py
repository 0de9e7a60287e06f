"""Command-line interface: ``deftrack run|gen|train-vocab|eval``.

Every subcommand reads its JSON config first and then applies flags on top,
so a flag always wins over the file. ``--set a.b=VALUE`` overrides any nested
field (VALUE is parsed as JSON, falling back to a plain string). Log
verbosity comes from the ``DEFTRACK_LOG`` environment variable.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np

from .datasets import SequenceConfig, write_sequence
from .errors import DeftrackError
from .evaluation import read_csv, read_tum, scale_drift, trajectory_error
from .image import GrayImage
from .pipeline import RunConfig, run_pipeline
from .synthetic import SyntheticSceneConfig, generate_synthetic_sequence
from .vocabulary import descriptors_from_images, train_vocabulary

log = logging.getLogger("deftrack")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".pgm"}


def configure_logging(env: Optional[str] = None) -> int:
    """Set the root level from ``DEFTRACK_LOG`` (name or number); default WARNING."""
    value = os.environ.get("DEFTRACK_LOG", "WARNING") if env is None else env
    level = int(value) if value.strip().isdigit() else logging.getLevelName(value.strip().upper())
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    return level


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, assignments: Sequence[str]) -> dict:
    """Apply ``dotted.key=value`` assignments to a nested dict (in place)."""
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise DeftrackError(f"override {item!r} is not of the form key=value")
        *parents, leaf = key.split(".")
        node = data
        for p in parents:
            child = node.get(p)
            if child is None:
                child = node[p] = {}
            if not isinstance(child, dict):
                raise DeftrackError(f"override {item!r}: {p!r} is not a section")
            node = child
        node[leaf] = _parse_value(raw)
    return data


def _read_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DeftrackError(f"cannot read {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise DeftrackError(f"{path} must hold a JSON object")
    return data


def cmd_run(args) -> int:
    data = _read_json(args.config)
    if args.output_dir is not None:
        data["output_dir"] = str(args.output_dir)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.vocabulary is not None:
        data["vocabulary_path"] = str(args.vocabulary)
    if args.keyframe_stride is not None:
        data["keyframe_stride"] = args.keyframe_stride
    if args.no_relocalization:
        data["relocalization"] = False
    apply_overrides(data, args.set)
    cfg = RunConfig.from_dict(data)
    result = run_pipeline(cfg, write=True)
    print(json.dumps({k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in result.summary.items()}, indent=2, sort_keys=True))
    return 0


def cmd_gen(args) -> int:
    data = _read_json(args.config) if args.config is not None else {}
    data = data.get("synthetic", data)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.frames is not None:
        data["frames"] = args.frames
    apply_overrides(data, args.set)
    try:
        scene = SyntheticSceneConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise DeftrackError(f"invalid synthetic config: {exc}") from exc
    seq = generate_synthetic_sequence(scene)
    out = write_sequence(
        args.out,
        seq.frames,
        seq.intrinsics,
        masks=seq.masks,
        depths=[g.depth for g in seq.ground_truth],
        poses=seq.poses,
        fps=scene.fps,
        extra={"synthetic": scene.to_dict()},
    )
    print(f"wrote {scene.frames} frames to {out}")
    return 0


def read_corpus(root) -> list[GrayImage]:
    root = Path(root)
    if not root.is_dir():
        raise DeftrackError(f"corpus {root} is not a directory")
    images = []
    for path in sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES):
        arr = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
        if arr is None:
            log.warning("skipping unreadable image %s", path)
            continue
        images.append(GrayImage(arr.astype(np.float64) / 255.0))
    if not images:
        raise DeftrackError(f"no images found under {root}")
    return images


def cmd_train_vocab(args) -> int:
    images = read_corpus(args.corpus)
    corpus = descriptors_from_images(images, budget=args.budget)
    vocab = train_vocabulary(corpus, k=args.k, depth=args.depth, seed=args.seed)
    vocab.save(args.out)
    print(f"trained {vocab.n_words} words from {len(images)} images into {args.out}")
    return 0


def evaluate_run(run_dir, gt_dir) -> dict:
    """Trajectory error against a sequence directory plus metrics.csv summaries."""
    run_dir = Path(run_dir)
    seq = SequenceConfig.from_directory(gt_dir)
    if seq.gt_poses is None:
        raise DeftrackError(f"{gt_dir} has no ground-truth poses")
    ts, est = read_tum(run_dir / "traj.txt")
    idx = np.rint(ts * seq.fps).astype(int)
    keep = [k for k, i in enumerate(idx) if 0 <= i < len(seq.gt_poses)]
    report = trajectory_error([est[k] for k in keep], [seq.gt_poses[idx[k]] for k in keep])
    report["ate_pct_path"] = 100.0 * report["ate_rmse"] / report["path_length"] if report["path_length"] > 0 else None
    rows = read_csv(run_dir / "metrics.csv")
    rmse = [float(r["rmse_mm"]) for r in rows if np.isfinite(float(r["rmse_mm"]))]
    scales = [float(r["scale_s"]) for r in rows if np.isfinite(float(r["scale_s"]))]
    report["frames"] = len(rows)
    report["lost_frames"] = sum(r["status"] == "Lost" for r in rows)
    report["mean_rmse_mm"] = float(np.mean(rmse)) if rmse else None
    report["scale_drift"] = scale_drift(scales) if len(scales) >= 2 else None
    report["mean_matched_pct"] = float(np.mean([float(r["matched_pct"]) for r in rows])) if rows else None
    report["mean_inlier_pct"] = float(np.mean([float(r["inlier_pct"]) for r in rows])) if rows else None
    return report


def cmd_eval(args) -> int:
    report = evaluate_run(args.run, args.gt)
    text = json.dumps(report, indent=2, sort_keys=True)
    (Path(args.run) / "eval.json").write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deftrack", description="Deformable monocular tracking on synthetic or recorded sequences.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="track a sequence and write trajectory, metrics and meshes")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--output-dir", type=Path)
    run.add_argument("--seed", type=int)
    run.add_argument("--vocabulary", type=Path)
    run.add_argument("--keyframe-stride", type=int)
    run.add_argument("--no-relocalization", action="store_true")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    run.set_defaults(func=cmd_run)

    gen = sub.add_parser("gen", help="render a synthetic sequence to disk")
    gen.add_argument("--config", type=Path)
    gen.add_argument("--out", required=True, type=Path)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--frames", type=int)
    gen.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    gen.set_defaults(func=cmd_gen)

    tv = sub.add_parser("train-vocab", help="train a bag-of-words vocabulary from a folder of images")
    tv.add_argument("--corpus", required=True, type=Path)
    tv.add_argument("--out", required=True, type=Path)
    tv.add_argument("--k", type=int, default=10)
    tv.add_argument("--depth", type=int, default=3)
    tv.add_argument("--budget", type=int, default=500)
    tv.add_argument("--seed", type=int, default=0)
    tv.set_defaults(func=cmd_train_vocab)

    ev = sub.add_parser("eval", help="score a run directory against a ground-truth sequence")
    ev.add_argument("--run", required=True, type=Path)
    ev.add_argument("--gt", required=True, type=Path)
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DeftrackError as exc:
        print(f"deftrack: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
