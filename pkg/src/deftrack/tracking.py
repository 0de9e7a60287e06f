"""Per-frame two-step deformable tracking.

Step 1 tracks last frame's inliers into the new image in translational mode
and runs a first joint pose/deformation solve. Step 2 reprojects the rest
of the local map with that estimate, tracks each point from its anchor
keyframe with a plane-induced homography, and solves again on the union.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .datasets import DynamicMask, dilate_mask
from .errors import DegenerateGeometryError, InsufficientDataError
from .geometry import CameraPose, Intrinsics
from .image import GrayImage, ImagePyramid, build_pyramid
from .lk import TrackParams, compute_plane_homography, track_feature_set
from .mapdata import LocalMap, Map, Match, MatchSource
from .mesh import face_normals, surface_positions
from .optimizer import OptimizationConfig, optimize_deformation

log = logging.getLogger(__name__)

DEFAULT_COVISIBILITY = 15


class TrackingStatus(str, enum.Enum):
    TRACKING = "Tracking"
    LOST = "Lost"


@dataclass(eq=False)
class FrameInput:
    """One image ready for tracking; ``blocked`` is the dilated dynamic mask."""

    index: int
    image: GrayImage
    pyramid: ImagePyramid
    mask: Optional[DynamicMask] = None
    blocked: Optional[DynamicMask] = None

    @classmethod
    def prepare(cls, index: int, image: GrayImage, mask: Optional[DynamicMask], params: TrackParams, dilation: int) -> "FrameInput":
        pyr = build_pyramid(image, params.pyramid_levels, 0.5, params.half_width)
        blocked = None if mask is None else dilate_mask(mask, dilation)
        return cls(index, image, pyr, mask, blocked)

    def allowed(self, positions: np.ndarray) -> np.ndarray:
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        if self.blocked is None:
            return np.ones(len(positions), dtype=bool)
        return ~self.blocked.contains(positions)


@dataclass(eq=False)
class TrackingState:
    """Outcome of one frame. ``features`` seeds step 1 of the next frame."""

    frame_index: int
    pose: CameraPose
    status: TrackingStatus
    matches: list = field(default_factory=list)
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    stats: dict = field(default_factory=dict)
    frame: Optional[FrameInput] = None
    features: list = field(default_factory=list)  # (point id, pixel)

    def __post_init__(self):
        if int(np.sum(self.inliers)) > len(self.matches):
            raise ValueError("more inliers than matches")

    @property
    def n_inliers(self) -> int:
        return int(np.sum(self.inliers))


def empty_stats() -> dict:
    return {"step1_tracked": 0, "step1_inliers": 0, "step2_new": 0, "matches": 0, "inliers": 0, "local_map_size": 0}


def select_local_map(
    map_: Map,
    pose: CameraPose,
    current_template=None,
    observed: Optional[set] = None,
    theta_cov: int = DEFAULT_COVISIBILITY,
) -> LocalMap:
    """Current-template points plus points of covisible keyframes, ordered by id.

    A keyframe is covisible when it shares at least ``theta_cov`` observed
    points with ``observed`` (the points seen in the current frame).
    """
    template = map_.template if current_template is None else current_template
    if template is None:
        return LocalMap(None, {}, [])
    ids = {pid for pid, p in map_.points.items() if p.template_id == template.id}
    observed = set() if observed is None else set(observed)
    covis = []
    for kf_id in sorted(map_.keyframes):
        kf = map_.keyframes[kf_id]
        if len(kf.observed_points & observed) >= theta_cov:
            covis.append(kf_id)
            ids |= {pid for pid in kf.observed_points if pid in map_.points}
    return LocalMap(template, {pid: map_.points[pid] for pid in sorted(ids)}, covis)


def _point_arrays(local_map: LocalMap, pids: list):
    pts = [local_map.points[p] for p in pids]
    face_idx = np.array([p.embedding.face for p in pts], dtype=np.intp)
    bary = np.array([p.embedding.barycentric for p in pts], dtype=np.float64).reshape(-1, 3)
    return face_idx, bary


def visible_points(local_map: LocalMap, pose: CameraPose, K: Intrinsics, frame: FrameInput, margin: float):
    """Template points in front of the camera, facing it, inside the image and unmasked.

    Returns (point ids, world positions, pixels, face normals).
    """
    mesh = local_map.template
    pids = [p.id for p in local_map.on_template()]
    if mesh is None or not pids:
        return [], np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 3))
    face_idx, bary = _point_arrays(local_map, pids)
    P = surface_positions(mesh.current_vertices, mesh.faces, face_idx, bary)
    normals = face_normals(mesh, "current")[face_idx]
    p_c = pose.transform(P)
    ok = p_c[:, 2] > 1e-6
    facing = np.einsum("ij,ij->i", normals, pose.center - P) > 0
    uv = np.full((len(P), 2), -1.0)
    uv[ok] = K.project(p_c[ok])
    h, w = frame.image.height, frame.image.width
    inside = (uv[:, 0] >= margin) & (uv[:, 0] <= w - 1 - margin) & (uv[:, 1] >= margin) & (uv[:, 1] <= h - 1 - margin)
    keep = ok & facing & inside & frame.allowed(uv)
    idx = np.flatnonzero(keep)
    return [pids[i] for i in idx], P[idx], uv[idx], normals[idx]


def _solve(local_map, matches, pose_init, prev_pose, cfg, K):
    if len(matches) < 4:
        return None
    try:
        return optimize_deformation(local_map, matches, pose_init, prev_pose, cfg, K)
    except InsufficientDataError:
        return None


def track_local_map(
    frame: FrameInput,
    map_: Map,
    pose_init: CameraPose,
    prev_pose: CameraPose,
    base_matches: list,
    cfg: OptimizationConfig,
    params: TrackParams,
    K: Intrinsics,
    theta_cov: int = DEFAULT_COVISIBILITY,
):
    """Step 2: homography-guided reobservation of local-map points, then a joint solve.

    Returns (matches, inlier flags, pose, number of new matches, local map size).
    """
    observed = {m.map_point for m in base_matches}
    local_map = select_local_map(map_, pose_init, observed=observed, theta_cov=theta_cov)
    margin = params.half_width + 1
    pids, P, uv, normals = visible_points(local_map, pose_init, K, frame, margin)
    visible = set(pids) | {m.map_point for m in base_matches if m.map_point in local_map.points}
    by_anchor: dict[int, list] = {}
    for pid, p, u, n in zip(pids, P, uv, normals):
        if pid in observed:
            continue
        point = local_map.points[pid]
        kf = map_.keyframes.get(point.anchor_keyframe)
        if kf is None or kf.pyramid is None:
            continue
        try:
            h = compute_plane_homography(p, n, kf.pose, pose_init, K)
            h = h.translated(u - h.apply(point.anchor_pixel))
        except DegenerateGeometryError:
            continue
        by_anchor.setdefault(point.anchor_keyframe, []).append((pid, point.anchor_pixel, h))
    new_matches = []
    for kf_id in sorted(by_anchor):
        group = by_anchor[kf_id]
        results = track_feature_set(map_.keyframes[kf_id].pyramid, frame.pyramid, [(a, h, None) for _, a, h in group], params)
        pos = np.array([r.position for r in results]).reshape(-1, 2)
        allowed = frame.allowed(pos)
        for (pid, _, _), r, ok in zip(group, results, allowed):
            if r.converged and ok:
                new_matches.append(Match(pid, (float(r.position[0]), float(r.position[1])), MatchSource.LOCAL_MAP_REPROJECTION))
    matches = sorted(list(base_matches) + new_matches, key=lambda m: m.map_point)
    res = _solve(local_map, matches, pose_init, prev_pose, cfg.refined(), K)
    if res is None:
        return matches, np.zeros(len(matches), dtype=bool), pose_init, len(new_matches), len(visible)
    return matches, res.inliers, res.pose, len(new_matches), len(visible)


def track_frame(
    prev: TrackingState,
    frame: FrameInput,
    map_: Map,
    cfg: OptimizationConfig,
    params: TrackParams,
    K: Intrinsics,
    theta_cov: int = DEFAULT_COVISIBILITY,
) -> TrackingState:
    """Track one frame from the previous state (which must be Tracking)."""
    stats = empty_stats()
    mesh = map_.template
    saved = None if mesh is None else mesh.current_vertices.copy()

    # Step 1: previous-frame features, translational LK.
    feats = [(pid, px) for pid, px in prev.features if pid in map_.points]
    matches1 = []
    if feats and prev.frame is not None:
        results = track_feature_set(prev.frame.pyramid, frame.pyramid, [(px, None, None) for _, px in feats], params)
        pos = np.array([r.position for r in results]).reshape(-1, 2)
        allowed = frame.allowed(pos)
        for (pid, _), r, ok in zip(feats, results, allowed):
            if r.converged and ok:
                matches1.append(Match(pid, (float(r.position[0]), float(r.position[1])), MatchSource.PREVIOUS_FRAME))
    stats["step1_tracked"] = len(matches1)
    local_map = select_local_map(map_, prev.pose, observed={m.map_point for m in matches1}, theta_cov=theta_cov)
    matches1 = [m for m in matches1 if m.map_point in local_map.points]
    res1 = _solve(local_map, matches1, prev.pose, prev.pose, cfg, K)
    if res1 is None:
        pose1, base = prev.pose, []
    else:
        pose1 = res1.pose
        base = [m for m, ok in zip(matches1, res1.inliers) if ok]
        stats["step1_inliers"] = len(base)

    # Step 2: local-map reprojection with homographies.
    matches, inliers, pose, n_new, lm_size = track_local_map(frame, map_, pose1, prev.pose, base, cfg, params, K, theta_cov)
    stats.update(step2_new=n_new, matches=len(matches), inliers=int(inliers.sum()), local_map_size=lm_size)

    if inliers.sum() < cfg.lost_inliers:
        if saved is not None:
            mesh.current_vertices = saved
        log.info("frame %d: lost (%d inliers)", frame.index, int(inliers.sum()))
        return TrackingState(frame.index, prev.pose, TrackingStatus.LOST, matches, inliers, stats, frame, [])
    features = [(m.map_point, np.array(m.observation)) for m, ok in zip(matches, inliers) if ok]
    return TrackingState(frame.index, pose, TrackingStatus.TRACKING, matches, inliers, stats, frame, features)
