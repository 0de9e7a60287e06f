"""Rigid transforms, Lie-group helpers and the pinhole camera model.

Twists are ordered (rotation, translation): ``xi = (w1, w2, w3, v1, v2, v3)``.
Pose increments are applied on the left: ``exp(delta) * T``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import CheiralityError, LogDomainError

_SMALL = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < _SMALL:
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + np.sin(theta) / theta * W + (1.0 - np.cos(theta)) / theta**2 * W @ W


def so3_log(R: np.ndarray) -> np.ndarray:
    cos_theta = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta >= np.pi - 1e-6:
        raise LogDomainError(f"rotation angle {theta:.9f} rad is too close to pi")
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < _SMALL:
        return 0.5 * vee
    return theta / (2.0 * np.sin(theta)) * vee


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    return (
        np.eye(3)
        + (1.0 - np.cos(theta)) / theta**2 * W
        + (theta - np.sin(theta)) / theta**3 * W @ W
    )


def so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * W + W @ W / 12.0
    coef = (1.0 / theta**2) * (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta))))
    return np.eye(3) - 0.5 * W + coef * W @ W


def _se3_q(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Coupling block of the SE(3) left Jacobian."""
    theta = np.linalg.norm(w)
    Wx = skew(w)
    Vx = skew(v)
    if theta < 1e-4:
        # Series limits of the closed-form coefficients.
        c1, c2, c3 = 1.0 / 6.0, 1.0 / 24.0, 1.0 / 120.0
    else:
        t2, t3, t4, t5 = theta**2, theta**3, theta**4, theta**5
        s, c = np.sin(theta), np.cos(theta)
        c1 = (theta - s) / t3
        c2 = (t2 + 2.0 * c - 2.0) / (2.0 * t4)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t5)
    return (
        0.5 * Vx
        + c1 * (Wx @ Vx + Vx @ Wx + Wx @ Vx @ Wx)
        + c2 * (Wx @ Wx @ Vx + Vx @ Wx @ Wx - 3.0 * Wx @ Vx @ Wx)
        + c3 * (Wx @ Vx @ Wx @ Wx + Wx @ Wx @ Vx @ Wx)
    )


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse left Jacobian: log(exp(d) exp(xi)) ~= xi + J^-1(xi) d."""
    w, v = xi[:3], xi[3:]
    Jinv = so3_left_jacobian_inv(w)
    Q = _se3_q(w, v)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[3:, :3] = -Jinv @ Q @ Jinv
    return out


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-to-camera rigid transform: ``x_c = R @ x_w + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or np.linalg.det(R) <= 0:
            raise ValueError("rotation must be orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def exp(cls, xi) -> "CameraPose":
        xi = np.asarray(xi, dtype=np.float64)
        w, v = xi[:3], xi[3:]
        return cls(so3_exp(w), so3_left_jacobian(w) @ v)

    def log(self) -> np.ndarray:
        w = so3_log(self.rotation)
        v = so3_left_jacobian_inv(w) @ self.translation
        return np.concatenate([w, v])

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "CameraPose":
        R = np.asarray(T)[:3, :3]
        # Re-orthonormalize to absorb round-off from file formats.
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        if np.linalg.det(R) < 0:
            R = u @ np.diag([1.0, 1.0, -1.0]) @ vt
        return cls(R, np.asarray(T)[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "CameraPose":
        Rt = self.rotation.T
        return CameraPose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "CameraPose") -> "CameraPose":
        R = self.rotation @ other.rotation
        u, _, vt = np.linalg.svd(R)
        return CameraPose(u @ vt, self.rotation @ other.translation + self.translation)

    def retract(self, delta) -> "CameraPose":
        return CameraPose.exp(delta) @ self

    def transform(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def quaternion_xyzw(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_quat()

    def rotation_angle_to(self, other: "CameraPose") -> float:
        dR = self.rotation @ other.rotation.T
        return float(np.arccos(np.clip((np.trace(dR) - 1.0) * 0.5, -1.0, 1.0)))


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    def project(self, points_c: np.ndarray) -> np.ndarray:
        """Project camera-frame points (..., 3) to pixels (..., 2)."""
        p = np.asarray(points_c, dtype=np.float64)
        z = p[..., 2]
        if np.any(z <= 0):
            raise CheiralityError("point with non-positive depth")
        return np.stack([self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy], axis=-1)

    def rays(self, pixels: np.ndarray) -> np.ndarray:
        """Camera-frame rays with unit z for pixels (..., 2)."""
        px = np.asarray(pixels, dtype=np.float64)
        return np.stack(
            [(px[..., 0] - self.cx) / self.fx, (px[..., 1] - self.cy) / self.fy, np.ones(px.shape[:-1])],
            axis=-1,
        )

    def backproject(self, pixels: np.ndarray, depth) -> np.ndarray:
        return self.rays(pixels) * np.asarray(depth, dtype=np.float64)[..., None]

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


def projection_jacobian(K: Intrinsics, p_c: np.ndarray) -> np.ndarray:
    """d(pixel)/d(camera point), shape (..., 2, 3)."""
    p = np.asarray(p_c, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    iz = 1.0 / z
    J = np.zeros(p.shape[:-1] + (2, 3))
    J[..., 0, 0] = K.fx * iz
    J[..., 0, 2] = -K.fx * x * iz * iz
    J[..., 1, 1] = K.fy * iz
    J[..., 1, 2] = -K.fy * y * iz * iz
    return J


def umeyama_alignment(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Similarity (s, R, t) minimizing ||dst - (s R src + t)||^2."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = (xs**2).sum() / len(src)
    s = float(np.trace(np.diag(D) @ S) / var_s) if with_scale and var_s > 0 else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t
