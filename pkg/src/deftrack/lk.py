"""Illumination-invariant pyramidal Lucas-Kanade tracking.

Each feature solves, coarse to fine, for a flow ``d``, a gain ``alpha`` and
a bias ``beta`` minimizing

    sum_x (I(x) - alpha * J(h(x) + d) - beta)^2

over a square patch around the reference point, where ``h`` is either the
identity (translational mode) or a plane-induced homography that
pre-distorts the patch (homographic mode). All features of a batch are
solved together with vectorized 4x4 Gauss-Newton steps; per-feature results
do not depend on the rest of the batch.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DegenerateGeometryError, DegenerateHomographyError
from .geometry import CameraPose, Intrinsics
from .image import ImagePyramid, bilinear, bilinear_gradient, in_bounds, patch_offsets, ssim_values


class TrackStatus(str, enum.Enum):
    CONVERGED = "Converged"
    DIVERGED = "Diverged"
    OUT_OF_BOUNDS = "OutOfBounds"
    GATED_BY_SSIM = "GatedBySSIM"


@dataclass(frozen=True)
class TrackParams:
    half_width: int = 5
    pyramid_levels: int = 3
    max_iterations_per_level: int = 30
    convergence_epsilon: float = 0.01
    ssim_threshold: float = 0.7
    alpha_bounds: tuple[float, float] = (0.25, 4.0)
    max_flow: float = 30.0
    # Smallest accepted eigenvalue ratio of the 4x4 normal matrix.
    min_eigen_ratio: float = 1e-9
    # Per-iteration cap on the flow update, in pixels of the current level.
    max_step: float = 1.0

    def __post_init__(self):
        if self.convergence_epsilon <= 0:
            raise ValueError("convergence_epsilon must be positive")
        lo, hi = self.alpha_bounds
        if not 0 < lo < hi:
            raise ValueError("alpha_bounds must satisfy 0 < min < max")
        if not -1.0 < self.ssim_threshold < 1.0:
            raise ValueError("ssim_threshold must lie in (-1, 1)")
        if self.half_width < 0 or self.pyramid_levels < 1:
            raise ValueError("half_width >= 0 and pyramid_levels >= 1 required")


@dataclass(frozen=True, eq=False)
class FlowResult:
    """Outcome of tracking one feature.

    ``flow`` is the level-0 displacement d; ``position`` is the matched
    level-0 location, ``u + d`` or ``h(u) + d``.
    """

    flow: np.ndarray
    gain: float
    bias: float
    ssim_score: float
    status: TrackStatus
    iterations: int
    position: np.ndarray

    @property
    def converged(self) -> bool:
        return self.status is TrackStatus.CONVERGED

    def same_as(self, other: "FlowResult") -> bool:
        return (
            np.array_equal(self.flow, other.flow)
            and self.gain == other.gain
            and self.bias == other.bias
            and (self.ssim_score == other.ssim_score or (np.isnan(self.ssim_score) and np.isnan(other.ssim_score)))
            and self.status is other.status
            and self.iterations == other.iterations
        )


@dataclass(frozen=True, eq=False)
class PlaneHomography:
    """3x3 map from reference pixels to current pixels, normalized h[2,2] = 1."""

    h: np.ndarray

    def __post_init__(self):
        h = np.array(self.h, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(h)) or abs(h[2, 2]) < 1e-15:
            raise DegenerateHomographyError("homography is not finite or has h[2,2] = 0")
        h = h / h[2, 2]
        if abs(np.linalg.det(h)) <= 1e-12:
            raise DegenerateHomographyError("homography is singular")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @classmethod
    def identity(cls) -> "PlaneHomography":
        return cls(np.eye(3))

    def apply(self, points) -> np.ndarray:
        return apply_homography(self.h, np.asarray(points, dtype=np.float64))

    def translated(self, shift) -> "PlaneHomography":
        T = np.eye(3)
        T[:2, 2] = shift
        return PlaneHomography(T @ self.h)


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply (..., 3, 3) homographies to (..., N, 2) points."""
    x, y = pts[..., 0], pts[..., 1]
    if h.ndim == 2:
        h = h[None]
        squeeze = pts.ndim == 2
        x, y = np.atleast_2d(x), np.atleast_2d(y)
    else:
        squeeze = False
    hx = h[:, 0, 0, None] * x + h[:, 0, 1, None] * y + h[:, 0, 2, None]
    hy = h[:, 1, 0, None] * x + h[:, 1, 1, None] * y + h[:, 1, 2, None]
    hw = h[:, 2, 0, None] * x + h[:, 2, 1, None] * y + h[:, 2, 2, None]
    out = np.stack([hx / hw, hy / hw], axis=-1)
    if squeeze:
        out = out[0]
    return out


def compute_plane_homography(
    point_w,
    normal_w,
    T_ref: CameraPose,
    T_cur: CameraPose,
    K: Intrinsics,
) -> PlaneHomography:
    """Homography induced by the plane through ``point_w`` with normal ``normal_w``.

    With the plane written n^T X = d in the reference camera frame and
    (R, t) the reference-to-current motion, h = K (R + t n^T / d) K^-1.
    """
    point_w = np.asarray(point_w, dtype=np.float64)
    normal_w = np.asarray(normal_w, dtype=np.float64)
    if abs(np.linalg.norm(normal_w) - 1.0) > 1e-6:
        raise ValueError("normal must be unit length")
    p_ref = T_ref.transform(point_w)
    p_cur = T_cur.transform(point_w)
    if p_ref[2] <= 0 or p_cur[2] <= 0:
        raise DegenerateGeometryError("plane point is behind a camera")
    n_ref = T_ref.rotation @ normal_w
    d_ref = float(n_ref @ p_ref)
    if abs(d_ref) < 1e-9:
        raise DegenerateGeometryError("plane passes through the reference optical center")
    if abs(float((T_cur.rotation @ normal_w) @ p_cur)) < 1e-9:
        raise DegenerateGeometryError("plane passes through the current optical center")
    rel = T_cur @ T_ref.inverse()
    H = rel.rotation + np.outer(rel.translation, n_ref) / d_ref
    return PlaneHomography(K.K @ H @ K.K_inv)


def _track_batch(
    ref: ImagePyramid,
    cur: ImagePyramid,
    centers: np.ndarray,
    homographies: np.ndarray,
    d0: np.ndarray,
    params: TrackParams,
) -> list[FlowResult]:
    n = len(centers)
    if n == 0:
        return []
    levels = min(params.pyramid_levels, len(ref), len(cur))
    dx, dy = patch_offsets(params.half_width)
    offsets = np.stack([dx, dy], axis=-1)  # (P, 2)
    lo, hi = params.alpha_bounds

    d = d0.astype(np.float64).copy()
    alpha = np.ones(n)
    beta = np.zeros(n)
    status: list[Optional[TrackStatus]] = [None] * n
    iterations = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)

    for level in range(levels - 1, -1, -1):
        s = ref.scale_factor**level
        I_img = ref[level].data
        J_img = cur[level].data
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        ref_pts = centers[idx, None, :] * s + offsets[None]  # (f, P, 2)
        ref_ok = in_bounds(I_img.shape, ref_pts[..., 0], ref_pts[..., 1]).all(axis=1)
        base = apply_homography(homographies[idx], ref_pts / s) * s
        cur_ok = in_bounds(J_img.shape, base[..., 0] + d[idx, None, 0] * s, base[..., 1] + d[idx, None, 1] * s, 1.0).all(axis=1)
        usable = ref_ok & cur_ok
        if level == 0:
            for k in idx[~usable]:
                status[k] = TrackStatus.OUT_OF_BOUNDS
                alive[k] = False
        idx, ref_pts, base = idx[usable], ref_pts[usable], base[usable]
        if idx.size == 0:
            continue
        I_vals = bilinear(I_img, ref_pts[..., 0], ref_pts[..., 1])
        dl = d[idx] * s
        a = alpha[idx].copy()
        b = beta[idx].copy()
        active = np.ones(idx.size, dtype=bool)
        for _ in range(params.max_iterations_per_level):
            act = np.flatnonzero(active)
            if act.size == 0:
                break
            qx = base[act, :, 0] + dl[act, None, 0]
            qy = base[act, :, 1] + dl[act, None, 1]
            ok = in_bounds(J_img.shape, qx, qy, 1.0).all(axis=1)
            for k in act[~ok]:
                status[idx[k]] = TrackStatus.OUT_OF_BOUNDS
                alive[idx[k]] = False
                active[k] = False
            act, qx, qy = act[ok], qx[ok], qy[ok]
            if act.size == 0:
                break
            Jv = bilinear(J_img, qx, qy)
            gx, gy = bilinear_gradient(J_img, qx, qy)
            r, A = photometric_residual(I_vals[act], Jv, gx, gy, a[act], b[act])
            H = (A[:, :, :, None] * A[:, :, None, :]).sum(axis=1)
            g = (A * r[:, :, None]).sum(axis=1)
            eig = np.linalg.eigvalsh(H)
            good = np.all(np.isfinite(H), axis=(1, 2)) & (eig[:, 0] > params.min_eigen_ratio * np.maximum(eig[:, -1], 1e-300))
            delta = np.zeros((act.size, 4))
            if good.any():
                delta[good] = np.linalg.solve(H[good], -g[good][..., None])[..., 0]
            iterations[idx[act]] += 1
            # Gauss-Newton is only trusted within about one pixel of the linearization point.
            norm = np.hypot(delta[:, 0], delta[:, 1])
            scale = np.where(norm > params.max_step, params.max_step / np.maximum(norm, 1e-300), 1.0)
            delta *= scale[:, None]
            dl[act] += delta[:, :2]
            a[act] += delta[:, 2]
            b[act] += delta[:, 3]
            step = np.hypot(delta[:, 0], delta[:, 1]) / s
            flow_norm = np.hypot(dl[act, 0], dl[act, 1]) / s
            bad = (
                ~good
                | ~np.isfinite(delta).all(axis=1)
                | (flow_norm > 2.0 * params.max_flow)
            )
            for k in act[bad]:
                status[idx[k]] = TrackStatus.DIVERGED
                alive[idx[k]] = False
                active[k] = False
            done = ~bad & (step < params.convergence_epsilon)
            active[act[done]] = False
        gain_bad = alive[idx] & ((a < lo) | (a > hi))
        for k in idx[gain_bad]:
            status[k] = TrackStatus.DIVERGED
            alive[k] = False
        keep = alive[idx]
        d[idx[keep]] = dl[keep] / s
        alpha[idx[keep]] = a[keep]
        beta[idx[keep]] = b[keep]

    # Final SSIM gate on the level-0 warp, after undoing the estimated gain and bias.
    I0 = ref[0].data
    J0 = cur[0].data
    ref_pts = centers[:, None, :] + offsets[None]
    warped = apply_homography(homographies, ref_pts) + d[:, None, :]
    results = []
    for k in range(n):
        score = float("nan")
        st = status[k]
        if st is None:
            if in_bounds(J0.shape, warped[k, :, 0], warped[k, :, 1]).all() and in_bounds(
                I0.shape, ref_pts[k, :, 0], ref_pts[k, :, 1]
            ).all():
                iv = bilinear(I0, ref_pts[k, :, 0], ref_pts[k, :, 1])
                jv = bilinear(J0, warped[k, :, 0], warped[k, :, 1])
                score = float(ssim_values(iv, alpha[k] * jv + beta[k]))
                if np.hypot(*d[k]) > params.max_flow:
                    st = TrackStatus.DIVERGED
                elif score < params.ssim_threshold:
                    st = TrackStatus.GATED_BY_SSIM
                else:
                    st = TrackStatus.CONVERGED
            else:
                st = TrackStatus.OUT_OF_BOUNDS
        position = apply_homography(homographies[k], centers[k][None])[0] + d[k]
        results.append(
            FlowResult(
                flow=d[k].copy(),
                gain=float(alpha[k]),
                bias=float(beta[k]),
                ssim_score=score,
                status=st,
                iterations=int(iterations[k]),
                position=position,
            )
        )
    return results


def photometric_residual(I_vals, J_vals, gx, gy, alpha, beta):
    """Residual I - alpha*J - beta and its Jacobian w.r.t. (dx, dy, alpha, beta).

    All inputs are (F, P) except ``alpha`` and ``beta`` which are (F,).
    Returns r (F, P) and A (F, P, 4).
    """
    alpha = np.asarray(alpha)[..., None]
    beta = np.asarray(beta)[..., None]
    r = I_vals - alpha * J_vals - beta
    A = np.stack([-alpha * gx, -alpha * gy, -J_vals, -np.ones_like(J_vals)], axis=-1)
    return r, A


def _as_h(h) -> np.ndarray:
    if h is None:
        return np.eye(3)
    if isinstance(h, PlaneHomography):
        return np.array(h.h)
    return np.array(PlaneHomography(h).h)


def track_translational(
    ref: ImagePyramid,
    cur: ImagePyramid,
    u: Sequence[float],
    d0: Sequence[float] = (0.0, 0.0),
    params: TrackParams = TrackParams(),
) -> FlowResult:
    return track_feature_set(ref, cur, [(u, None, d0)], params)[0]


def track_homographic(
    ref: ImagePyramid,
    cur: ImagePyramid,
    u: Sequence[float],
    h: PlaneHomography,
    params: TrackParams = TrackParams(),
) -> FlowResult:
    if not isinstance(h, PlaneHomography):
        h = PlaneHomography(h)
    return track_feature_set(ref, cur, [(u, h, None)], params)[0]


def track_feature_set(
    ref: ImagePyramid,
    cur: ImagePyramid,
    features: Iterable,
    params: TrackParams = TrackParams(),
) -> list[FlowResult]:
    """Track ``(u, h or None, d0 or None)`` triples independently, in order.

    A feature with a homography starts from zero residual flow; one without
    runs in translational mode from ``d0``.
    """
    features = list(features)
    if not features:
        return []
    centers = np.array([np.asarray(f[0], dtype=np.float64) for f in features]).reshape(-1, 2)
    homs = np.stack([_as_h(f[1]) for f in features])
    d0 = np.array(
        [
            np.zeros(2) if (f[1] is not None or len(f) < 3 or f[2] is None) else np.asarray(f[2], dtype=np.float64)
            for f in features
        ]
    )
    if not np.all(np.isfinite(d0)):
        raise ValueError("initial flow must be finite")
    return _track_batch(ref, cur, centers, homs, d0, params)
