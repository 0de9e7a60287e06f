"""Oriented FAST corners with 256-bit rotated binary descriptors.

Detection and the binary test pattern come from OpenCV (FAST-9 and ORB's
descriptor stage with caller-supplied keypoints). Bucketing, mask
exclusion and the intensity-centroid orientation are done here, so the
descriptor is steered by our own angle.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import cv2
import numpy as np

from .datasets import DynamicMask, dilate_mask
from .image import GrayImage

DESCRIPTOR_BYTES = 32
# ORB samples a 31x31 window; keep keypoints clear of the border by this much.
BORDER = 19
CENTROID_RADIUS = 15
HARRIS_BLOCK = 7

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


@dataclass(frozen=True)
class FeatureParams:
    budget: int = 500
    fast_threshold: int = 7
    grid: tuple[int, int] = (8, 6)
    mask_dilation: int = 8

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be >= 1")


@dataclass(frozen=True, eq=False)
class Keypoint:
    position: np.ndarray
    response: float
    orientation: float  # radians


@dataclass(eq=False)
class FeatureSet:
    """Parallel arrays: positions (N, 2), responses, orientations, descriptors (N, 32) uint8."""

    positions: np.ndarray
    responses: np.ndarray
    orientations: np.ndarray
    descriptors: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)

    def keypoints(self) -> list[Keypoint]:
        return [Keypoint(p, float(r), float(a)) for p, r, a in zip(self.positions, self.responses, self.orientations)]

    @classmethod
    def empty(cls) -> "FeatureSet":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros(0), np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8))


def _centroid_offsets(radius: int):
    dy, dx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    keep = dx * dx + dy * dy <= radius * radius
    return dx[keep], dy[keep]


_CDX, _CDY = _centroid_offsets(CENTROID_RADIUS)


def intensity_centroid_angle(img_u8: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Orientation atan2(m01, m10) of a disc around each (integer) position."""
    if len(positions) == 0:
        return np.zeros(0)
    xi = np.rint(positions[:, 0]).astype(np.intp)
    yi = np.rint(positions[:, 1]).astype(np.intp)
    vals = img_u8[yi[:, None] + _CDY[None], xi[:, None] + _CDX[None]].astype(np.float64)
    m10 = vals @ _CDX
    m01 = vals @ _CDY
    return np.arctan2(m01, m10)


def _describe(img_u8: np.ndarray, positions: np.ndarray, angles: np.ndarray, responses: np.ndarray):
    """ORB descriptors at the given keypoints; returns (kept indices, descriptors)."""
    if len(positions) == 0:
        return np.zeros(0, dtype=np.intp), np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8)
    kps = [
        cv2.KeyPoint(float(p[0]), float(p[1]), 31.0, float(np.rad2deg(a) % 360.0), float(r), 0, int(i))
        for i, (p, a, r) in enumerate(zip(positions, angles, responses))
    ]
    orb = cv2.ORB_create(edgeThreshold=BORDER, patchSize=31)
    kps, desc = orb.compute(img_u8, kps)
    if desc is None or not kps:
        return np.zeros(0, dtype=np.intp), np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8)
    idx = np.array([k.class_id for k in kps], dtype=np.intp)
    order = np.argsort(idx, kind="stable")
    return idx[order], desc[order]


def _bucket(positions: np.ndarray, responses: np.ndarray, shape, grid, budget: int) -> np.ndarray:
    """Indices of the strongest corners, spread evenly over a grid of cells."""
    h, w = shape
    gx, gy = grid
    cx = np.minimum((positions[:, 0] * gx / w).astype(int), gx - 1)
    cy = np.minimum((positions[:, 1] * gy / h).astype(int), gy - 1)
    cell = cy * gx + cx
    # Strongest first, ties by position for determinism.
    order = np.lexsort((positions[:, 0], positions[:, 1], -responses))
    per_cell = {}
    for i in order:
        per_cell.setdefault(int(cell[i]), []).append(i)
    chosen = []
    rank = 0
    while len(chosen) < budget:
        added = False
        for c in sorted(per_cell):
            lst = per_cell[c]
            if rank < len(lst):
                chosen.append(lst[rank])
                added = True
                if len(chosen) == budget:
                    break
        if not added:
            break
        rank += 1
    return np.array(sorted(chosen, key=lambda i: (-responses[i], positions[i, 1], positions[i, 0])), dtype=np.intp)


def detect_corners(img_u8: np.ndarray, threshold: int):
    """FAST-9 candidates ranked by Harris response with 3x3 non-maximum suppression.

    Ties are broken in raster order, so flat-topped maxima (e.g. on binary
    images) keep exactly one corner.
    """
    fast = cv2.FastFeatureDetector_create(
        threshold=int(threshold), nonmaxSuppression=False, type=cv2.FAST_FEATURE_DETECTOR_TYPE_9_16
    )
    kps = fast.detect(img_u8, None)
    if not kps:
        return np.zeros((0, 2)), np.zeros(0)
    xy = np.array([k.pt for k in kps], dtype=np.float64)
    xi, yi = xy[:, 0].astype(np.intp), xy[:, 1].astype(np.intp)
    harris = cv2.cornerHarris(img_u8.astype(np.float32) / 255.0, HARRIS_BLOCK, 3, 0.04)
    h, w = img_u8.shape
    score = np.full((h + 2, w + 2), -np.inf)
    score[yi + 1, xi + 1] = harris[yi, xi]
    rank = np.full((h + 2, w + 2), -1, dtype=np.int64)
    rank[yi + 1, xi + 1] = yi * w + xi
    s0 = score[yi + 1, xi + 1]
    r0 = rank[yi + 1, xi + 1]
    keep = np.ones(len(xy), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            sn = score[yi + 1 + dy, xi + 1 + dx]
            rn = rank[yi + 1 + dy, xi + 1 + dx]
            keep &= (s0 > sn) | ((s0 == sn) & (rn > r0)) | (rn < 0)
    return xy[keep], s0[keep]


def extract_features(frame: GrayImage, mask: Optional[DynamicMask] = None, budget: Optional[int] = None,
                     params: FeatureParams = FeatureParams()) -> FeatureSet:
    """FAST-9 corners outside the dilated mask, bucketed, oriented and described."""
    budget = params.budget if budget is None else budget
    if budget < 1:
        raise ValueError("budget must be >= 1")
    img = frame.to_uint8()
    h, w = img.shape
    pos, resp = detect_corners(img, params.fast_threshold)
    if len(pos) == 0:
        return FeatureSet.empty()
    keep = (pos[:, 0] >= BORDER) & (pos[:, 0] < w - BORDER) & (pos[:, 1] >= BORDER) & (pos[:, 1] < h - BORDER)
    if mask is not None:
        blocked = dilate_mask(mask, params.mask_dilation)
        keep &= ~blocked.contains(pos)
    pos, resp = pos[keep], resp[keep]
    if len(pos) == 0:
        return FeatureSet.empty()
    sel = _bucket(pos, resp, (h, w), params.grid, budget)
    pos, resp = pos[sel], resp[sel]
    ang = intensity_centroid_angle(img, pos)
    idx, desc = _describe(img, pos, ang, resp)
    return FeatureSet(pos[idx], resp[idx], ang[idx], desc)


def describe_at(frame: GrayImage, positions: np.ndarray):
    """Descriptors at arbitrary positions; returns (kept indices, descriptors)."""
    img = frame.to_uint8()
    h, w = img.shape
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    ok = (
        (positions[:, 0] >= BORDER) & (positions[:, 0] < w - BORDER) & (positions[:, 1] >= BORDER) & (positions[:, 1] < h - BORDER)
    )
    idx0 = np.flatnonzero(ok)
    ang = intensity_centroid_angle(img, positions[idx0])
    idx, desc = _describe(img, positions[idx0], ang, np.zeros(len(idx0)))
    return idx0[idx], desc


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    return int(_POPCOUNT[np.bitwise_xor(np.asarray(a, np.uint8), np.asarray(b, np.uint8))].sum())


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, M) Hamming distances between two descriptor arrays."""
    a = np.asarray(a, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
    b = np.asarray(b, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.int32)
    out = np.empty((len(a), len(b)), dtype=np.int32)
    for start in range(0, len(a), 256):
        x = np.bitwise_xor(a[start : start + 256, None, :], b[None, :, :])
        out[start : start + 256] = _POPCOUNT[x].sum(axis=-1, dtype=np.int32)
    return out


def match_descriptors(a: np.ndarray, b: np.ndarray, ratio: float = 0.8, max_distance: int = 64) -> list[tuple[int, int, int]]:
    """Mutual nearest neighbours passing Lowe's ratio test in both directions.

    Returns (index in a, index in b, distance) sorted by index in a.
    """
    D = hamming_matrix(a, b)
    if D.size == 0:
        return []

    def passes(M):
        nn = np.argmin(M, axis=1)
        best = M[np.arange(len(M)), nn]
        if M.shape[1] > 1:
            second = np.partition(M, 1, axis=1)[:, 1]
        else:
            second = np.full(len(M), np.iinfo(np.int32).max)
        return nn, best, best < ratio * second

    nn_ab, best_ab, ok_ab = passes(D)
    nn_ba, _, ok_ba = passes(D.T)
    out = []
    for i in range(len(D)):
        j = int(nn_ab[i])
        if ok_ab[i] and ok_ba[j] and nn_ba[j] == i and best_ab[i] <= max_distance:
            out.append((i, j, int(best_ab[i])))
    return out
