"""End-to-end driver: tracking, relocalization, keyframes, metrics and artifacts."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .datasets import SequenceConfig, SequenceFrame, load_sequence
from .errors import ConfigError, InsufficientDataError, TrainingError
from .evaluation import (
    METRICS_HEADER,
    FrameMetrics,
    ground_truth_points,
    rmse_scale_corrected,
    scale_drift,
    to_csv,
    track_percentages,
    track_quality_report,
    tum_line,
)
from .features import FeatureParams, extract_features
from .geometry import CameraPose, Intrinsics
from .lk import TrackParams
from .mapdata import Map, Match, MatchSource
from .mapping import MappingParams, initialize_map, insert_keyframe
from .mesh import write_ply
from .optimizer import OptimizationConfig
from .relocalization import RelocalizationParams, relocalize
from .synthetic import SyntheticSceneConfig, generate_synthetic_sequence
from .tracking import DEFAULT_COVISIBILITY, FrameInput, TrackingState, TrackingStatus, track_frame
from .vocabulary import KeyframeDatabase, Vocabulary, train_vocabulary

log = logging.getLogger(__name__)


def _plain(obj) -> dict:
    d = asdict(obj)
    for k, v in d.items():
        if isinstance(v, np.ndarray):
            d[k] = v.tolist()
        elif isinstance(v, tuple):
            d[k] = list(v)
    return d


def _build(cls, d: Optional[dict]):
    d = dict(d or {})
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) and k != "motion_info" else v for k, v in d.items()}
    if "motion_info" in kw:
        kw["motion_info"] = np.array(kw["motion_info"], dtype=np.float64)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


@dataclass
class RunConfig:
    """One pipeline run. Exactly one of ``synthetic`` and ``sequence_dir`` is set."""

    output_dir: Path
    synthetic: Optional[SyntheticSceneConfig] = None
    sequence_dir: Optional[Path] = None
    tracker: TrackParams = field(default_factory=TrackParams)
    optimizer: OptimizationConfig = field(default_factory=OptimizationConfig)
    mapping: MappingParams = field(default_factory=MappingParams)
    features: FeatureParams = field(default_factory=FeatureParams)
    relocalization: bool = True
    relocalization_params: RelocalizationParams = field(default_factory=RelocalizationParams)
    vocabulary_path: Optional[Path] = None
    keyframe_stride: int = 10
    mask_dilation: int = 8
    covisibility: int = DEFAULT_COVISIBILITY
    ply_frames: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)
        if (self.synthetic is None) == (self.sequence_dir is None):
            raise ConfigError("set exactly one of 'synthetic' and 'sequence_dir'")
        if self.keyframe_stride < 1:
            raise ConfigError("keyframe_stride must be >= 1")
        if self.mask_dilation < 0:
            raise ConfigError("mask_dilation must be >= 0")

    def to_dict(self) -> dict:
        return {
            "output_dir": str(self.output_dir),
            "synthetic": None if self.synthetic is None else self.synthetic.to_dict(),
            "sequence_dir": None if self.sequence_dir is None else str(self.sequence_dir),
            "tracker": _plain(self.tracker),
            "optimizer": _plain(self.optimizer),
            "mapping": _plain(self.mapping),
            "features": _plain(self.features),
            "relocalization": self.relocalization,
            "relocalization_params": _plain(self.relocalization_params),
            "vocabulary_path": None if self.vocabulary_path is None else str(self.vocabulary_path),
            "keyframe_stride": self.keyframe_stride,
            "mask_dilation": self.mask_dilation,
            "covisibility": self.covisibility,
            "ply_frames": list(self.ply_frames),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config fields: {sorted(unknown)}")
        if "output_dir" not in d:
            raise ConfigError("output_dir is required")
        synthetic = d.get("synthetic")
        if synthetic is not None:
            try:
                synthetic = SyntheticSceneConfig.from_dict(synthetic)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid synthetic config: {exc}") from exc
        vocab = d.get("vocabulary_path")
        seq = d.get("sequence_dir")
        return cls(
            output_dir=Path(d["output_dir"]),
            synthetic=synthetic,
            sequence_dir=None if seq is None else Path(seq),
            tracker=_build(TrackParams, d.get("tracker")),
            optimizer=_build(OptimizationConfig, d.get("optimizer")),
            mapping=_build(MappingParams, d.get("mapping")),
            features=_build(FeatureParams, d.get("features")),
            relocalization=bool(d.get("relocalization", True)),
            relocalization_params=_build(RelocalizationParams, d.get("relocalization_params")),
            vocabulary_path=None if vocab is None else Path(vocab),
            keyframe_stride=int(d.get("keyframe_stride", 10)),
            mask_dilation=int(d.get("mask_dilation", 8)),
            covisibility=int(d.get("covisibility", DEFAULT_COVISIBILITY)),
            ply_frames=tuple(int(x) for x in d.get("ply_frames", ())),
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)


@dataclass(eq=False)
class RunResult:
    states: list
    metrics: list
    map: Map
    intrinsics: Intrinsics
    surface_extent: float
    gt_poses: list
    summary: dict


def _synthetic_frames(cfg: SyntheticSceneConfig) -> tuple[Intrinsics, float, Iterator[SequenceFrame]]:
    seq = generate_synthetic_sequence(cfg)

    def gen():
        for k in range(cfg.frames):
            gt = seq.ground_truth[k]
            yield SequenceFrame(k, seq.frames[k], seq.masks[k], gt.depth, gt.pose)

    return seq.intrinsics, cfg.fps, gen()


def open_source(cfg: RunConfig) -> tuple[Intrinsics, float, Iterator[SequenceFrame]]:
    if cfg.synthetic is not None:
        return _synthetic_frames(cfg.synthetic)
    seq = SequenceConfig.from_directory(cfg.sequence_dir)
    return seq.intrinsics, seq.fps, load_sequence(seq)


def fallback_vocabulary(image, fparams: FeatureParams, k: int = 10, depth: int = 3, tiles: int = 4, seed: int = 0) -> Vocabulary:
    """Vocabulary from one image, each of ``tiles x tiles`` regions one document.

    The depth shrinks until the image supplies at least k^depth descriptors.
    """
    feats = extract_features(image, None, budget=4 * fparams.budget, params=fparams)
    n = len(feats.descriptors)
    while depth > 1 and k**depth > n:
        depth -= 1
    if k**depth > n:
        raise TrainingError(f"first frame has {n} descriptors, too few for a vocabulary")
    cell = np.floor(feats.positions / np.array([image.width, image.height]) * tiles).astype(int)
    doc = cell[:, 1] * tiles + cell[:, 0]
    corpus = [feats.descriptors[doc == d] for d in range(tiles * tiles)]
    return train_vocabulary([c for c in corpus if len(c)], k, depth, seed)


def _frame_metrics(state: TrackingState, map_: Map, K: Intrinsics, depth) -> FrameMetrics:
    status = state.status.value
    if state.status is TrackingStatus.LOST:
        return FrameMetrics(state.frame_index, float("nan"), float("nan"), 0.0, 0.0, status)
    matched, inlier = track_percentages(state.stats.get("matches", 0), state.stats.get("inliers", 0), state.stats.get("local_map_size", 0))
    rmse, s = float("nan"), float("nan")
    inl = [m for m, ok in zip(state.matches, state.inliers) if ok]
    if depth is not None and len(inl) >= 3:
        est = state.pose.transform(np.array([map_.point_position(m.map_point) for m in inl]))
        gt, valid = ground_truth_points(np.array([m.observation for m in inl]), depth, K)
        try:
            r, s = rmse_scale_corrected(est[valid], gt[valid])
            rmse = 1000.0 * r
        except InsufficientDataError:
            pass
    return FrameMetrics(state.frame_index, rmse, s, matched, inlier, status)


def _initial_state(frame: FrameInput, features: list, map_: Map) -> TrackingState:
    n = len(features)
    stats = {"step1_tracked": 0, "step1_inliers": 0, "step2_new": 0, "matches": n, "inliers": n, "local_map_size": len(map_.points)}
    matches = [Match(pid, (float(px[0]), float(px[1])), MatchSource.LOCAL_MAP_REPROJECTION) for pid, px in features]
    return TrackingState(frame.index, CameraPose.identity(), TrackingStatus.TRACKING, matches, np.ones(n, dtype=bool), stats, frame, features)


def run_pipeline(cfg: RunConfig, write: bool = True) -> RunResult:
    """Process a whole sequence; raises ConfigError on unusable configuration."""
    K, fps, frames = open_source(cfg)
    opt = cfg.optimizer
    rparams = replace(cfg.relocalization_params, seed=cfg.seed)
    try:
        first = next(frames)
    except StopIteration:
        raise ConfigError("sequence has no frames") from None
    if first.depth is None:
        raise ConfigError("the first frame needs a depth map to build the template")

    vocab = None
    if cfg.relocalization:
        if cfg.vocabulary_path is not None:
            vocab = Vocabulary.load(cfg.vocabulary_path)
        else:
            vocab = fallback_vocabulary(first.image, cfg.features, seed=cfg.seed)
            log.info("no vocabulary given: trained %d words on the first frame", vocab.n_words)

    db = KeyframeDatabase()
    fr0 = FrameInput.prepare(first.index, first.image, first.mask, cfg.tracker, cfg.mask_dilation)
    map_, feats = initialize_map(fr0, first.depth, K, db, vocab, params=cfg.mapping, fparams=cfg.features)
    extent = map_.template.extent()
    state = _initial_state(fr0, feats, map_)
    last_good = state
    states, metrics, gt_poses = [state], [_frame_metrics(state, map_, K, first.depth)], [first.pose]

    for item in frames:
        fr = FrameInput.prepare(item.index, item.image, item.mask, cfg.tracker, cfg.mask_dilation)
        new = None
        if state.status is TrackingStatus.TRACKING:
            new = track_frame(state, fr, map_, opt, cfg.tracker, K, cfg.covisibility)
        elif cfg.relocalization:
            new = relocalize(fr, map_, db, vocab, opt, K, rparams, cfg.features, cfg.tracker)
        else:
            new = track_frame(last_good, fr, map_, opt, cfg.tracker, K, cfg.covisibility)
        if new is None:
            new = TrackingState(item.index, last_good.pose, TrackingStatus.LOST, frame=fr)
        if new.status is TrackingStatus.TRACKING:
            if item.index % cfg.keyframe_stride == 0:
                _, new.features = insert_keyframe(
                    map_, fr, new.pose, new.features, K, db, vocab, cfg.mapping, cfg.features, depth=item.depth
                )
            last_good = new
        state = new
        states.append(state)
        metrics.append(_frame_metrics(state, map_, K, item.depth))
        gt_poses.append(item.pose)
        if item.index in cfg.ply_frames and write:
            cfg.output_dir.mkdir(parents=True, exist_ok=True)
            write_ply(cfg.output_dir / f"mesh_{item.index:06d}.ply", map_.template)
        log.info("frame %d: %s, %d inliers", item.index, state.status.value, state.n_inliers)

    if len(states) == 1:
        log.warning("sequence has a single frame: map initialized, nothing to track")
    summary = summarize(states, metrics, extent)
    result = RunResult(states, metrics, map_, K, extent, gt_poses, summary)
    if write:
        write_outputs(cfg, result, fps)
    return result


def summarize(states: list, metrics: list, extent: float) -> dict:
    rmse = [m.rmse_mm for m in metrics if np.isfinite(m.rmse_mm)]
    scales = [m.scale_s for m in metrics if np.isfinite(m.scale_s)]
    try:
        drift = scale_drift(scales)
    except InsufficientDataError:
        drift = float("nan")
    step1 = sum(s.stats.get("step1_tracked", 0) for s in states[1:])
    total = sum(s.stats.get("matches", 0) for s in states[1:] if s.stats.get("step1_tracked", 0) > 0)
    return {
        "frames": len(states),
        "lost_frames": sum(s.status is TrackingStatus.LOST for s in states),
        "mean_rmse_mm": float(np.mean(rmse)) if rmse else float("nan"),
        "mean_rmse_pct_extent": float(np.mean(rmse) / (1000.0 * extent) * 100.0) if rmse else float("nan"),
        "surface_extent_m": extent,
        "scale_drift": drift,
        "step1_matches": step1,
        "step2_matches": total,
    }


def write_outputs(cfg: RunConfig, result: RunResult, fps: float) -> None:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "traj.txt", "w", newline="\n") as fh:
        for st in result.states:
            fh.write(tum_line(st.frame_index / fps, st.pose) + "\n")
    rows = [(m.frame, m.rmse_mm, m.scale_s, m.matched_pct, m.inlier_pct, m.status) for m in result.metrics]
    (out / "metrics.csv").write_text(to_csv(METRICS_HEADER, rows), newline="\n")
    sizes = [st.stats.get("local_map_size", 0) for st in result.states]
    _, text = track_quality_report(result.states, sizes)
    (out / "track_quality.csv").write_text(text, newline="\n")
    summary = {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in result.summary.items()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
