"""Camera pose from 3D-2D correspondences with RANSAC over minimal P3P samples."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import cv2
import numpy as np

from .geometry import CameraPose, Intrinsics, projection_jacobian, skew


@dataclass(frozen=True, eq=False)
class PnPResult:
    success: bool
    pose: Optional[CameraPose]
    inliers: np.ndarray  # bool mask over the correspondences
    iterations: int = 0

    @property
    def n_inliers(self) -> int:
        return int(self.inliers.sum())


def _errors(pose: CameraPose, X: np.ndarray, u: np.ndarray, K: Intrinsics) -> np.ndarray:
    p = pose.transform(X)
    err = np.full(len(X), np.inf)
    ok = p[:, 2] > 1e-9
    err[ok] = np.linalg.norm(K.project(p[ok]) - u[ok], axis=1)
    return err


def refine_pose(pose: CameraPose, X: np.ndarray, u: np.ndarray, K: Intrinsics, iterations: int = 20) -> CameraPose:
    """Gauss-Newton on the summed squared reprojection error (left increments)."""
    for _ in range(iterations):
        p = pose.transform(X)
        if np.any(p[:, 2] <= 1e-9):
            break
        r = (K.project(p) - u).ravel()
        Jp = projection_jacobian(K, p)
        J = np.concatenate([-np.einsum("mij,mjk->mik", Jp, np.array([skew(q) for q in p])), Jp], axis=2).reshape(-1, 6)
        H = J.T @ J
        try:
            delta = np.linalg.solve(H + 1e-12 * np.eye(6), -J.T @ r)
        except np.linalg.LinAlgError:
            break
        pose = pose.retract(delta)
        if np.linalg.norm(delta) < 1e-12:
            break
    return pose


def _p3p(X: np.ndarray, u: np.ndarray, K: Intrinsics) -> list[CameraPose]:
    try:
        n, rvecs, tvecs = cv2.solveP3P(X.astype(np.float64), u.astype(np.float64), K.K, None, flags=cv2.SOLVEPNP_P3P)
    except cv2.error:
        return []
    out = []
    for rv, tv in zip(rvecs[:n], tvecs[:n]):
        R, _ = cv2.Rodrigues(rv)
        if np.all(np.isfinite(R)) and np.all(np.isfinite(tv)):
            out.append(CameraPose.from_matrix(np.block([[R, tv.reshape(3, 1)], [np.zeros((1, 3)), np.ones((1, 1))]])))
    return out


def solve_pnp_ransac(
    points_3d,
    pixels,
    K: Intrinsics,
    inlier_px: float = 8.0,
    iterations: int = 200,
    min_inliers: int = 15,
    seed: int = 0,
) -> PnPResult:
    """Robust pose; success needs at least ``min_inliers`` consensus points.

    The relaxed ``inlier_px`` tolerates mildly deformed map points.
    """
    X = np.asarray(points_3d, dtype=np.float64).reshape(-1, 3)
    u = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = len(X)
    if n < 4 or len(u) != n:
        return PnPResult(False, None, np.zeros(n, dtype=bool))
    rng = np.random.default_rng(seed)
    best_pose, best_inl, best_err = None, np.zeros(n, dtype=bool), np.inf
    it = 0
    for it in range(1, iterations + 1):
        sample = rng.choice(n, 3, replace=False)
        for pose in _p3p(X[sample], u[sample], K):
            err = _errors(pose, X, u, K)
            inl = err < inlier_px
            score = np.sum(np.minimum(err, inlier_px))
            if inl.sum() > best_inl.sum() or (inl.sum() == best_inl.sum() and score < best_err):
                best_pose, best_inl, best_err = pose, inl, score
        if best_inl.sum() == n:
            break
    if best_pose is None or best_inl.sum() < max(4, min_inliers):
        return PnPResult(False, None, best_inl, it)
    pose, inl = best_pose, best_inl
    for _ in range(3):
        pose = refine_pose(pose, X[inl], u[inl], K)
        new = _errors(pose, X, u, K) < inlier_px
        if new.sum() < 4 or np.array_equal(new, inl):
            break
        inl = new
    if inl.sum() < max(4, min_inliers):
        return PnPResult(False, None, inl, it)
    return PnPResult(True, pose, inl, it)
