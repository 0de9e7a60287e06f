"""Map bootstrapping and stride-based keyframe insertion.

Templates come from supplied depth maps. At each keyframe, corners near
tracked points are associated with those points; corners elsewhere on the
template become new map points anchored at the keyframe.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import BoundsError, DegenerateGeometryError, RayMissError
from .features import FeatureParams, describe_at, extract_features
from .geometry import CameraPose, Intrinsics
from .image import extract_patch
from .mapdata import KeyframeRecord, Map
from .mesh import MapPoint, TemplateMesh, create_template_from_depth, embed_point, face_normal, ray_mesh_intersections
from .tracking import FrameInput
from .vocabulary import KeyframeDatabase, Vocabulary

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MappingParams:
    grid: tuple[int, int] = (10, 10)
    stretch_weight: float = 10.0
    bend_weight: float = 2.0
    # Keypoints this close to a tracked point observe that point.
    association_radius: float = 2.0
    # No new point is created this close to an existing observation.
    exclusion_radius: float = 6.0
    # New template when less of the image than this sees the current one.
    min_coverage: float = 0.6
    patch_half_width: int = 5


def template_coverage(mesh: TemplateMesh, pose: CameraPose, K: Intrinsics, width: int, height: int, samples=(8, 6)) -> float:
    """Fraction of a pixel grid whose viewing rays hit the current mesh."""
    xs = np.linspace(0, width - 1, samples[0])
    ys = np.linspace(0, height - 1, samples[1])
    hits = 0
    for y in ys:
        for x in xs:
            d = pose.rotation.T @ K.rays(np.array([x, y]))
            hits += bool(ray_mesh_intersections(mesh.current_vertices, mesh.faces, pose.center, d)[3].any())
    return hits / (len(xs) * len(ys))


def insert_keyframe(
    map_: Map,
    frame: FrameInput,
    pose: CameraPose,
    tracked: list,
    K: Intrinsics,
    db: KeyframeDatabase,
    vocab: Optional[Vocabulary],
    params: MappingParams = MappingParams(),
    fparams: FeatureParams = FeatureParams(),
    depth: Optional[np.ndarray] = None,
) -> tuple[KeyframeRecord, list]:
    """Store a keyframe and grow the map; returns (record, features for the next frame).

    ``tracked`` lists the (point id, pixel) inliers of this frame. When
    ``depth`` is given and the current template covers too little of the
    view, a new template is created from it first.
    """
    mesh = map_.template
    if depth is not None and (
        mesh is None or template_coverage(mesh, pose, K, frame.image.width, frame.image.height) < params.min_coverage
    ):
        mesh = create_template_from_depth(depth, K, pose, params.grid, params.stretch_weight, params.bend_weight)
        map_.add_template(mesh)
        log.info("frame %d: new template %d", frame.index, mesh.id)
    kf_id = map_.new_keyframe_id()
    feats = extract_features(frame.image, frame.mask, params=fparams)
    tracked = [(pid, np.asarray(px, dtype=np.float64)) for pid, px in tracked]
    t_pos = np.array([px for _, px in tracked]).reshape(-1, 2)

    keypoints, descriptors, associations = [], [], {}
    assigned = set()
    new_features = []
    observed = {pid for pid, _ in tracked}
    for pos, desc in zip(feats.positions, feats.descriptors):
        row = len(keypoints)
        if len(t_pos):
            d = np.linalg.norm(t_pos - pos, axis=1)
            j = int(np.argmin(d))
            if d[j] <= params.association_radius and tracked[j][0] not in assigned:
                keypoints.append(pos)
                descriptors.append(desc)
                associations[row] = tracked[j][0]
                assigned.add(tracked[j][0])
                continue
            if d[j] < params.exclusion_radius:
                continue
        if new_features:
            dn = np.linalg.norm(np.array([px for _, px in new_features]) - pos, axis=1)
            if dn.min() < params.exclusion_radius:
                continue
        try:
            emb = embed_point(mesh, pos, K, pose)
            normal = face_normal(mesh, emb.face, "rest")
            patch = extract_patch(frame.pyramid, 0, pos, params.patch_half_width)
        except (RayMissError, DegenerateGeometryError, BoundsError) as exc:
            log.debug("corner %s not mapped: %s", pos, exc)
            continue
        pid = map_.new_point_id()
        map_.add_point(MapPoint(pid, mesh.id, emb, kf_id, pos.copy(), patch, normal))
        keypoints.append(pos)
        descriptors.append(desc)
        associations[row] = pid
        observed.add(pid)
        new_features.append((pid, pos.copy()))

    # Tracked points without a corner get a descriptor at their tracked position.
    rest = [(pid, px) for pid, px in tracked if pid not in assigned]
    if rest:
        idx, desc = describe_at(frame.image, np.array([px for _, px in rest]))
        for i, d in zip(idx, desc):
            associations[len(keypoints)] = rest[i][0]
            keypoints.append(rest[i][1])
            descriptors.append(d)

    keypoints = np.array(keypoints, dtype=np.float64).reshape(-1, 2)
    descriptors = np.array(descriptors, dtype=np.uint8).reshape(-1, 32)
    bow = vocab.transform(descriptors) if vocab is not None else {}
    record = KeyframeRecord(
        id=kf_id,
        frame_index=frame.index,
        pose=pose,
        keypoints=keypoints,
        descriptors=descriptors,
        bow=bow,
        template_id=mesh.id,
        template_rest=mesh.rest_vertices.copy(),
        template_current=mesh.current_vertices.copy(),
        associations=associations,
        observed_points=observed,
        pyramid=frame.pyramid,
    )
    map_.keyframes[kf_id] = record
    db.add(kf_id, bow, record)
    log.info("keyframe %d at frame %d: %d new points, %d associations", kf_id, frame.index, len(new_features), len(associations))
    return record, tracked + new_features


def initialize_map(
    frame: FrameInput,
    depth: np.ndarray,
    K: Intrinsics,
    db: KeyframeDatabase,
    vocab: Optional[Vocabulary],
    pose: CameraPose = CameraPose.identity(),
    params: MappingParams = MappingParams(),
    fparams: FeatureParams = FeatureParams(),
) -> tuple[Map, list]:
    """Template from the first depth map and keyframe 0; returns (map, features)."""
    map_ = Map()
    mesh = create_template_from_depth(depth, K, pose, params.grid, params.stretch_weight, params.bend_weight)
    map_.add_template(mesh)
    _, features = insert_keyframe(map_, frame, pose, [], K, db, vocab, params, fparams)
    return map_, features
