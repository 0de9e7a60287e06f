"""Joint camera-pose and template-deformation optimization.

The objective for one frame is

    sum_i w_i * huber(|pi(K, T * p_i(V)) - u_i|^2)     reprojection
  + stretching(V) + bending(V)                          deformation energy
  + lt * sum_v |v - v_prev|^2 / mean_edge^2            temporal anchoring
  + xi^T W xi,  xi = log(T * T_prev^-1)                 motion prior

minimized by Levenberg-Marquardt over a left se(3) increment and all vertex
coordinates of the local template, with dense normal equations.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import CheiralityError, InsufficientDataError
from .geometry import CameraPose, Intrinsics, projection_jacobian, se3_left_jacobian_inv, skew
from .mapdata import LocalMap, Match
from .mesh import TemplateMesh, stretch_terms, surface_positions

log = logging.getLogger(__name__)

_MIN_DEPTH = 1e-6


def default_motion_info() -> np.ndarray:
    return np.diag([1e2, 1e2, 1e2, 1e1, 1e1, 1e1])


@dataclass(frozen=True)
class OptimizationConfig:
    """Solver settings for one deformable optimization.

    ``huber_delta`` is used by the first tracking step and
    ``refine_huber_delta`` by the second. ``inlier_threshold`` defaults to
    the Huber delta in use.
    """

    huber_delta: float = 3.0
    refine_huber_delta: float = 2.0
    motion_info: np.ndarray = field(default_factory=default_motion_info)
    max_lm_iterations: int = 30
    lm_lambda_init: float = 1e-3
    inlier_threshold: Optional[float] = None
    temporal_weight: float = 100.0
    relative_tolerance: float = 1e-6
    # Outlier screening pass with the deformation weights scaled up; None disables it.
    rigid_round_stiffness: Optional[float] = 100.0
    rigid_round_gate: float = 2.0
    # Extra normal rounds after dropping matches beyond the inlier threshold.
    refit_rounds: int = 2
    lost_inliers: int = 20

    def __post_init__(self):
        W = np.array(self.motion_info, dtype=np.float64)
        if W.shape != (6, 6) or not np.allclose(W, W.T):
            raise ValueError("motion_info must be a symmetric 6x6 matrix")
        if np.linalg.eigvalsh(W).min() < -1e-9 * max(1.0, np.abs(W).max()):
            raise ValueError("motion_info must be positive semidefinite")
        if self.huber_delta <= 0 or self.refine_huber_delta <= 0:
            raise ValueError("huber deltas must be positive")
        if self.refit_rounds < 0:
            raise ValueError("refit_rounds must be >= 0")
        object.__setattr__(self, "motion_info", W)

    @property
    def threshold(self) -> float:
        return self.huber_delta if self.inlier_threshold is None else self.inlier_threshold

    def refined(self) -> "OptimizationConfig":
        """Config for the second (homography-guided) step."""
        return replace(self, huber_delta=self.refine_huber_delta)


def reprojection_residual(point_pos, pose: CameraPose, K: Intrinsics, obs):
    """Residual pi(K, T p) - obs with Jacobians w.r.t. a left pose increment and p."""
    p_c = pose.transform(np.asarray(point_pos, dtype=np.float64))
    if p_c[2] <= 0:
        raise CheiralityError("point is behind the camera")
    r = K.project(p_c) - np.asarray(obs, dtype=np.float64)
    Jp = projection_jacobian(K, p_c)
    J_pose = Jp @ np.hstack([-skew(p_c), np.eye(3)])
    J_point = Jp @ pose.rotation
    return r, J_pose, J_point


def _info_sqrt(W: np.ndarray) -> np.ndarray:
    """S with S^T S = W, for PSD W."""
    e, Q = np.linalg.eigh(W)
    return np.diag(np.sqrt(np.clip(e, 0.0, None))) @ Q.T


def motion_prior_terms(T_t: CameraPose, T_prev: CameraPose):
    """xi = log(T_t T_prev^-1) and d xi / d(left increment of T_t)."""
    xi = (T_t @ T_prev.inverse()).log()
    return xi, se3_left_jacobian_inv(xi)


def motion_prior_residual(T_t: CameraPose, T_prev: CameraPose, W: np.ndarray):
    """Cost xi^T W xi and its gradient w.r.t. a left increment of ``T_t``."""
    W = np.asarray(W, dtype=np.float64)
    xi, J = motion_prior_terms(T_t, T_prev)
    cost = float(xi @ W @ xi)
    grad = 2.0 * J.T @ (W @ xi)
    return cost, grad


def motion_prior_gradient_numeric(T_t: CameraPose, T_prev: CameraPose, W: np.ndarray, step: float = 1e-6):
    W = np.asarray(W, dtype=np.float64)
    grad = np.zeros(6)
    for k in range(6):
        e = np.zeros(6)
        e[k] = step
        cp = motion_prior_residual(T_t.retract(e), T_prev, W)[0]
        cm = motion_prior_residual(T_t.retract(-e), T_prev, W)[0]
        grad[k] = (cp - cm) / (2.0 * step)
    return grad


def huber_cost(sq: np.ndarray, delta: float) -> np.ndarray:
    """Huber on squared residual norms: s if s <= d^2 else 2 d sqrt(s) - d^2."""
    e = np.sqrt(sq)
    return np.where(e <= delta, sq, 2.0 * delta * e - delta * delta)


@dataclass
class DeformationResult:
    pose: CameraPose
    mesh: TemplateMesh
    inliers: np.ndarray
    residuals: np.ndarray
    initial_cost: float
    final_cost: float
    accepted_costs: list
    iterations: int
    lost: bool


class _Problem:
    """Objective of one LM round; state is (pose, V)."""

    def __init__(self, mesh, K, face_idx, bary, obs, weights, prev_pose, cfg, delta, stiffness, V_prev):
        self.mesh = mesh
        self.K = K
        self.face_idx = face_idx
        self.bary = bary
        self.obs = obs
        self.weights = weights
        self.prev_pose = prev_pose
        self.delta = delta
        self.sqrt_s = np.sqrt(mesh.stretch_weight * stiffness)
        self.sqrt_b = np.sqrt(mesh.bend_weight * stiffness)
        mean_edge = float(np.mean(mesh.rest_lengths))
        self.sqrt_t = np.sqrt(cfg.temporal_weight * stiffness) / mean_edge
        self.V_prev = V_prev
        self.S = _info_sqrt(cfg.motion_info)
        self.prior_on = bool(np.any(cfg.motion_info))
        self.n = mesh.n_vertices
        L = mesh.laplacian.toarray()
        self.L = L
        # Bending and temporal blocks are linear in V: their normal-matrix share is constant.
        self.H_const = np.kron(self.sqrt_b**2 * (L.T @ L) + self.sqrt_t**2 * np.eye(self.n), np.eye(3))

    def reprojections(self, pose, V):
        p_w = surface_positions(V, self.mesh.faces, self.face_idx, self.bary)
        p_c = pose.transform(p_w)
        if np.any(p_c[:, 2] <= _MIN_DEPTH):
            return None, p_c
        z = p_c[:, 2]
        proj = np.stack([self.K.fx * p_c[:, 0] / z + self.K.cx, self.K.fy * p_c[:, 1] / z + self.K.cy], axis=1)
        return proj - self.obs, p_c

    def cost(self, pose, V) -> float:
        r, _ = self.reprojections(pose, V)
        if r is None:
            return np.inf
        total = float(np.sum(self.weights * huber_cost(np.sum(r * r, axis=1), self.delta)))
        strain, _ = stretch_terms(self.mesh, V)
        total += self.sqrt_s**2 * float(strain @ strain)
        bend = self.L @ V - self.mesh.rest_laplacian
        total += self.sqrt_b**2 * float(np.sum(bend * bend))
        dv = V - self.V_prev
        total += self.sqrt_t**2 * float(np.sum(dv * dv))
        if self.prior_on:
            xi = (pose @ self.prev_pose.inverse()).log()
            pr = self.S @ xi
            total += float(pr @ pr)
        return total

    def normal_equations(self, pose, V):
        n3 = 3 * self.n
        dim = 6 + n3
        H = np.zeros((dim, dim))
        g = np.zeros(dim)
        r, p_c = self.reprojections(pose, V)
        # Reprojection block with IRLS Huber weights.
        e = np.linalg.norm(r, axis=1)
        irls = np.where(e <= self.delta, 1.0, self.delta / np.maximum(e, 1e-300)) * self.weights
        Jp = projection_jacobian(self.K, p_c)  # (M, 2, 3)
        m = len(r)
        Jrows = np.zeros((m, 2, dim))
        Jrows[:, :, :3] = -np.einsum("mij,mjk->mik", Jp, np.array([skew(p) for p in p_c]))
        Jrows[:, :, 3:6] = Jp
        JR = Jp @ pose.rotation  # (M, 2, 3)
        verts = self.mesh.faces[self.face_idx]  # (M, 3)
        rows = np.arange(m)[:, None, None]
        comps = np.arange(2)[None, :, None]
        for k in range(3):
            # The three vertices of a face are distinct, so these column sets never collide.
            cols = (6 + 3 * verts[:, k, None] + np.arange(3)[None])[:, None, :]
            Jrows[rows, comps, cols] = self.bary[:, k, None, None] * JR
        sw = np.sqrt(irls)
        Jw = (Jrows * sw[:, None, None]).reshape(2 * m, dim)
        rw = (r * sw[:, None]).ravel()
        H += Jw.T @ Jw
        g += Jw.T @ rw
        # Stretching.
        strain, d_strain = stretch_terms(self.mesh, V)
        E = len(strain)
        Js = np.zeros((E, dim))
        ei, ej = self.mesh.edges[:, 0], self.mesh.edges[:, 1]
        for c in range(3):
            Js[np.arange(E), 6 + 3 * ei + c] = self.sqrt_s * d_strain[:, c]
            Js[np.arange(E), 6 + 3 * ej + c] = -self.sqrt_s * d_strain[:, c]
        H += Js.T @ Js
        g += Js.T @ (self.sqrt_s * strain)
        # Bending and temporal anchoring.
        H[6:, 6:] += self.H_const
        bend = self.L @ V - self.mesh.rest_laplacian
        g[6:] += (self.sqrt_b**2 * (self.L.T @ bend) + self.sqrt_t**2 * (V - self.V_prev)).ravel()
        # Motion prior.
        if self.prior_on:
            xi, Jxi = motion_prior_terms(pose, self.prev_pose)
            A = self.S @ Jxi
            H[:6, :6] += A.T @ A
            g[:6] += A.T @ (self.S @ xi)
        return H, g

    def residual_norms(self, pose, V):
        p_w = surface_positions(V, self.mesh.faces, self.face_idx, self.bary)
        p_c = pose.transform(p_w)
        out = np.full(len(p_c), np.inf)
        ok = p_c[:, 2] > _MIN_DEPTH
        proj = self.K.project(p_c[ok])
        out[ok] = np.linalg.norm(proj - self.obs[ok], axis=1)
        return out


def _levenberg_marquardt(problem: _Problem, pose, V, cfg: OptimizationConfig):
    cost = problem.cost(pose, V)
    accepted = [cost]
    lam = cfg.lm_lambda_init
    iterations = 0
    stalled = False
    for _ in range(cfg.max_lm_iterations):
        iterations += 1
        H, g = problem.normal_equations(pose, V)
        diag = np.diag(H).copy()
        step_taken = False
        rel = np.inf
        while lam <= 1e12:
            A = H + np.diag(lam * (diag + 1e-9))
            try:
                delta = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            new_pose = pose.retract(delta[:6])
            new_V = V + delta[6:].reshape(-1, 3)
            new_cost = problem.cost(new_pose, new_V)
            if new_cost < cost:
                rel = (cost - new_cost) / max(cost, 1e-300)
                pose, V, cost = new_pose, new_V, new_cost
                accepted.append(cost)
                lam = max(lam * 0.1, 1e-12)
                step_taken = True
                break
            lam *= 10.0
        if not step_taken:
            gnorm = float(np.abs(g).max())
            stalled = gnorm > 1e-3 * max(1.0, cost)
            break
        if rel < cfg.relative_tolerance:
            break
    return pose, V, cost, accepted, iterations, stalled


def optimize_deformation(
    local_map: LocalMap,
    matches: Sequence[Match],
    pose_init: CameraPose,
    prev_pose: CameraPose,
    cfg: OptimizationConfig,
    K: Intrinsics,
) -> DeformationResult:
    """Solve for the camera pose and the local template deformation.

    Matches whose map point is not embedded on ``local_map.template`` are
    ignored and reported as outliers. The template's current vertices are
    overwritten with the solution.
    """
    mesh = local_map.template
    usable = []
    for k, m in enumerate(matches):
        p = local_map.points.get(m.map_point)
        if p is not None and mesh is not None and p.template_id == mesh.id:
            usable.append((k, p))
    if len(usable) < 4:
        raise InsufficientDataError(f"{len(usable)} usable matches, at least 4 required")
    face_idx = np.array([p.embedding.face for _, p in usable])
    bary = np.array([p.embedding.barycentric for _, p in usable])
    obs = np.array([matches[k].observation for k, _ in usable], dtype=np.float64)
    weights = np.array([matches[k].weight for k, _ in usable], dtype=np.float64)
    thr = cfg.threshold

    V_prev = mesh.current_vertices.copy()
    pose, V = pose_init, V_prev.copy()
    accepted_all = []
    iterations = 0
    lost = False

    active = np.ones(len(usable), dtype=bool)
    if cfg.rigid_round_stiffness is not None:
        # Screening: refit the stiff problem on the survivors until the set settles.
        for _ in range(cfg.refit_rounds + 1):
            sel = np.flatnonzero(active)
            stiff = _Problem(mesh, K, face_idx[sel], bary[sel], obs[sel], weights[sel], prev_pose, cfg, cfg.huber_delta, cfg.rigid_round_stiffness, V_prev)
            pose, V, _, acc, it, _ = _levenberg_marquardt(stiff, pose, V, cfg)
            accepted_all.append(acc)
            iterations += it
            everyone = _Problem(mesh, K, face_idx, bary, obs, weights, prev_pose, cfg, cfg.huber_delta, 1.0, V_prev)
            screened = everyone.residual_norms(pose, V) < cfg.rigid_round_gate * thr
            if screened.sum() < 4 or np.array_equal(screened, active):
                break
            active = screened

    # Normal rounds; matches beyond the inlier threshold are dropped and the rest refit.
    for _ in range(cfg.refit_rounds + 1):
        sel = np.flatnonzero(active)
        final = _Problem(mesh, K, face_idx[sel], bary[sel], obs[sel], weights[sel], prev_pose, cfg, cfg.huber_delta, 1.0, V_prev)
        initial_cost = final.cost(pose_init, V_prev)
        if final.cost(pose, V) > initial_cost:
            pose, V = pose_init, V_prev.copy()
        pose, V, cost, acc, it, stalled = _levenberg_marquardt(final, pose, V, cfg)
        accepted_all.append(acc)
        iterations += it
        lost = stalled
        keep = final.residual_norms(pose, V) < thr
        if keep.all() or keep.sum() < 4:
            break
        active = np.zeros(len(usable), dtype=bool)
        active[sel[keep]] = True

    full = _Problem(mesh, K, face_idx, bary, obs, weights, prev_pose, cfg, cfg.huber_delta, 1.0, V_prev)
    res_usable = full.residual_norms(pose, V)
    inliers = np.zeros(len(matches), dtype=bool)
    residuals = np.full(len(matches), np.inf)
    for j, (k, _) in enumerate(usable):
        residuals[k] = res_usable[j]
        inliers[k] = res_usable[j] < thr
    mesh.current_vertices = V
    if inliers.sum() < 4:
        lost = True
    return DeformationResult(pose, mesh, inliers, residuals, initial_cost, cost, accepted_all, iterations, lost)
