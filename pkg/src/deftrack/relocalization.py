"""Recovery after tracking loss.

Candidate keyframes come from bag-of-words retrieval. Each candidate's
map-point-associated descriptors are matched to the lost frame, the pose is
estimated by PnP-RANSAC against the keyframe's template snapshot, and the
snapshot is then re-deformed jointly with the pose.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InsufficientDataError
from .features import FeatureParams, FeatureSet, extract_features, match_descriptors
from .geometry import Intrinsics
from .mapdata import KeyframeRecord, Map, Match, MatchSource
from .mesh import surface_positions
from .optimizer import OptimizationConfig, optimize_deformation
from .pnp import solve_pnp_ransac
from .lk import TrackParams
from .tracking import FrameInput, TrackingState, TrackingStatus, empty_stats, select_local_map, track_local_map
from .vocabulary import KeyframeDatabase, Vocabulary, query_candidates

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RelocalizationParams:
    max_candidates: int = 5
    inlier_px: float = 8.0
    iterations: int = 200
    min_inliers: int = 15
    ratio: float = 0.8
    seed: int = 0


def keyframe_correspondences(map_: Map, kf: KeyframeRecord, feats: FeatureSet, ratio: float = 0.8):
    """Matches between frame features and a keyframe's associated descriptors.

    Returns (point ids, snapshot 3D positions, frame pixels).
    """
    rows = sorted(r for r, pid in kf.associations.items() if pid in map_.points and map_.points[pid].template_id == kf.template_id)
    if not rows or len(feats.descriptors) == 0:
        return [], np.zeros((0, 3)), np.zeros((0, 2))
    pairs = match_descriptors(feats.descriptors, kf.descriptors[rows], ratio=ratio)
    pids = [kf.associations[rows[j]] for _, j, _ in pairs]
    pixels = np.array([feats.positions[i] for i, _, _ in pairs], dtype=np.float64).reshape(-1, 2)
    if not pids:
        return [], np.zeros((0, 3)), pixels
    pts = [map_.points[p] for p in pids]
    faces = map_.templates[kf.template_id].faces
    face_idx = np.array([p.embedding.face for p in pts], dtype=np.intp)
    bary = np.array([p.embedding.barycentric for p in pts], dtype=np.float64)
    return pids, surface_positions(kf.template_current, faces, face_idx, bary), pixels


def relocalize(
    frame: FrameInput,
    map_: Map,
    db: KeyframeDatabase,
    vocab: Vocabulary,
    cfg: OptimizationConfig,
    K: Intrinsics,
    params: RelocalizationParams = RelocalizationParams(),
    fparams: FeatureParams = FeatureParams(),
    track_params: TrackParams = TrackParams(),
) -> Optional[TrackingState]:
    """Try candidates in rank order; None when all fail (map state unchanged).

    After the deformable solve on the PnP inliers, the local map is searched
    by homography-guided LK as in the second tracking step; that refinement
    is kept only when it retains at least ``min_inliers`` inliers.
    """
    feats = extract_features(frame.image, frame.mask, params=fparams)
    if len(feats.positions) < params.min_inliers:
        return None
    for kf_id, score in query_candidates(db, feats.descriptors, vocab, params.max_candidates):
        if score <= 0:
            break
        kf = db.records.get(kf_id)
        if kf is None:
            continue
        pids, X, u = keyframe_correspondences(map_, kf, feats, params.ratio)
        if len(pids) < params.min_inliers:
            continue
        pnp = solve_pnp_ransac(X, u, K, params.inlier_px, params.iterations, params.min_inliers, params.seed)
        if not pnp.success:
            continue
        mesh = map_.templates[kf.template_id]
        saved_vertices, saved_template = mesh.current_vertices.copy(), map_.current_template
        mesh.current_vertices = kf.template_current.copy()
        map_.current_template = kf.template_id
        matches = [Match(pid, (float(px[0]), float(px[1])), MatchSource.RELOCALIZATION) for pid, px, ok in zip(pids, u, pnp.inliers) if ok]
        local_map = select_local_map(map_, pnp.pose, mesh, observed={m.map_point for m in matches})
        try:
            res = optimize_deformation(local_map, matches, pnp.pose, pnp.pose, cfg, K)
        except InsufficientDataError:
            res = None
        if res is None or res.lost or res.inliers.sum() < params.min_inliers:
            mesh.current_vertices, map_.current_template = saved_vertices, saved_template
            log.debug("frame %d: candidate keyframe %d rejected", frame.index, kf_id)
            continue
        base = [m for m, ok in zip(matches, res.inliers) if ok]
        pose, inliers = res.pose, res.inliers
        solved = mesh.current_vertices.copy()
        more, more_inl, more_pose, n_new, lm_size = track_local_map(frame, map_, pose, pose, base, cfg, track_params, K)
        if more_inl.sum() >= params.min_inliers:
            matches, inliers, pose = more, more_inl, more_pose
        else:
            mesh.current_vertices = solved
            lm_size = len(base)
        stats = empty_stats()
        stats.update(step2_new=n_new, matches=len(matches), inliers=int(inliers.sum()), local_map_size=lm_size)
        features = [(m.map_point, np.array(m.observation)) for m, ok in zip(matches, inliers) if ok]
        log.info("frame %d: relocalized against keyframe %d (%d inliers)", frame.index, kf_id, int(inliers.sum()))
        return TrackingState(frame.index, pose, TrackingStatus.TRACKING, matches, inliers, stats, frame, features)
    return None
