"""Reconstruction and tracking-quality metrics."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InsufficientDataError
from .geometry import CameraPose, Intrinsics, umeyama_alignment
from .image import bilinear


def fmt(x) -> str:
    """Nine significant digits, '.' separator."""
    if isinstance(x, str):
        return x
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return "nan"
    return f"{float(x):.9g}"


def rmse_scale_corrected(est, gt) -> tuple[float, float]:
    """RMSE after the best single scale s* = sum(p.g) / sum(p.p); returns (rmse, s*)."""
    p = np.asarray(est, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(p) != len(g):
        raise ValueError("est and gt must have the same length")
    if len(p) < 3:
        raise InsufficientDataError(f"{len(p)} point pairs, at least 3 required")
    pp = float(np.sum(p * p))
    if pp <= 0:
        raise InsufficientDataError("all estimated points are at the origin")
    s = float(np.sum(p * g)) / pp
    rmse = float(np.sqrt(np.mean(np.sum((s * p - g) ** 2, axis=1))))
    return rmse, s


def scale_drift(per_frame_scales: Sequence[float], window: float = 0.1) -> float:
    """median(last 10% of valid scales) / median(first 10%), windows of >= 1 frame."""
    s = np.asarray([x for x in per_frame_scales if x is not None], dtype=np.float64)
    s = s[np.isfinite(s) & (s > 0)]
    if len(s) < 2:
        raise InsufficientDataError("need at least two valid per-frame scales")
    n = max(1, int(np.floor(window * len(s))))
    return float(np.median(s[-n:]) / np.median(s[:n]))


def ground_truth_points(pixels: np.ndarray, depth: np.ndarray, K: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame GT points at the given pixels by bilinear depth lookup; returns (points, valid)."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    h, w = depth.shape
    inside = (pixels[:, 0] >= 0) & (pixels[:, 0] <= w - 1) & (pixels[:, 1] >= 0) & (pixels[:, 1] <= h - 1)
    z = np.full(len(pixels), np.nan)
    z[inside] = bilinear(depth, pixels[inside, 0], pixels[inside, 1])
    valid = np.isfinite(z) & (z > 0)
    pts = np.full((len(pixels), 3), np.nan)
    pts[valid] = K.backproject(pixels[valid], z[valid])
    return pts, valid


@dataclass(frozen=True)
class FrameMetrics:
    frame: int
    rmse_mm: float
    scale_s: float
    matched_pct: float
    inlier_pct: float
    status: str

    def __post_init__(self):
        if not (0.0 <= self.inlier_pct <= self.matched_pct <= 100.0):
            raise ValueError("percentages must satisfy 0 <= inlier <= matched <= 100")


METRICS_HEADER = ["frame", "rmse_mm", "scale_s", "matched_pct", "inlier_pct", "status"]
QUALITY_HEADER = ["frame", "matched_pct", "inlier_pct", "status"]


def track_percentages(matches: int, inliers: int, local_map_size: int) -> tuple[float, float]:
    if local_map_size <= 0:
        return 0.0, 0.0
    matched = min(100.0, 100.0 * matches / local_map_size)
    return matched, min(matched, 100.0 * inliers / local_map_size)


def track_quality_report(states: Sequence, local_map_sizes: Sequence[int]) -> tuple[list, str]:
    """Per-frame (frame, matched_pct, inlier_pct, status) rows and their CSV text.

    Lost frames report zero percentages.
    """
    if len(states) != len(local_map_sizes):
        raise ValueError("states and local_map_sizes must be aligned")
    rows = []
    for st, size in zip(states, local_map_sizes):
        status = st.status.value if hasattr(st.status, "value") else str(st.status)
        if status == "Lost":
            m, i = 0.0, 0.0
        else:
            m, i = track_percentages(len(st.matches), int(np.sum(st.inliers)), size)
        rows.append((st.frame_index, m, i, status))
    return rows, to_csv(QUALITY_HEADER, rows)


def to_csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) if not isinstance(v, (int, np.integer)) or isinstance(v, bool) else str(int(v)) for v in r])
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def trajectory_error(est: Sequence[CameraPose], gt: Sequence[CameraPose]) -> dict:
    """Camera-center ATE after a similarity (Umeyama) alignment."""
    if len(est) != len(gt) or len(est) < 3:
        raise InsufficientDataError("need at least three aligned poses")
    a = np.array([p.center for p in est])
    b = np.array([p.center for p in gt])
    s, R, t = umeyama_alignment(a, b, with_scale=True)
    aligned = (s * (R @ a.T)).T + t
    err = np.linalg.norm(aligned - b, axis=1)
    path = float(np.sum(np.linalg.norm(np.diff(b, axis=0), axis=1)))
    return {"ate_rmse": float(np.sqrt(np.mean(err**2))), "path_length": path, "scale": float(s)}


def read_tum(path) -> tuple[np.ndarray, list]:
    """Timestamps and world-to-camera poses from a camera-to-world TUM trajectory."""
    ts, poses = [], []
    for line in open(path):
        if not line.strip() or line.startswith("#"):
            continue
        v = [float(x) for x in line.split()]
        ts.append(v[0])
        R_wc = Rotation.from_quat(v[4:8]).as_matrix()
        poses.append(CameraPose(R_wc.T, -R_wc.T @ np.array(v[1:4])))
    return np.array(ts), poses


def tum_line(timestamp: float, pose: CameraPose) -> str:
    """``timestamp tx ty tz qx qy qz qw`` of the camera-to-world transform."""
    inv = pose.inverse()
    q = inv.quaternion_xyzw()
    return " ".join(fmt(v) for v in [timestamp, *inv.translation, *q])


def mean_or_nan(values: Sequence[float]) -> float:
    v = [x for x in values if x is not None and np.isfinite(x)]
    return float(np.mean(v)) if v else float("nan")


def percentile_or_nan(values: Sequence[float], q: float) -> Optional[float]:
    v = [x for x in values if x is not None and np.isfinite(x)]
    return float(np.percentile(v, q)) if v else float("nan")
