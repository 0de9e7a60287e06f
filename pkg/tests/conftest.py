"""Shared fixtures: textures, cameras, cached synthetic runs and the acceptance report."""
from __future__ import annotations

import cv2
import numpy as np
import pytest

from deftrack.geometry import CameraPose, Intrinsics, so3_exp
from deftrack.image import GrayImage, build_pyramid
from deftrack.mapdata import LocalMap, Match
from deftrack.mesh import MapPoint, create_template_from_depth, embed_point, surface_positions
from deftrack.synthetic import SyntheticSceneConfig, _intersect, camera_pose, surface_height

ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


def smooth_texture(height: int, width: int, seed: int = 0, lo: float = 0.1, hi: float = 0.9, sigma: float = 2.0) -> np.ndarray:
    """Band-limited random texture rescaled to [lo, hi]."""
    rng = np.random.default_rng(seed)
    tex = np.zeros((height, width))
    for cell, amp in ((24, 1.0), (12, 0.6), (6, 0.4)):
        coarse = rng.random((height // cell + 3, width // cell + 3))
        tex += amp * cv2.resize(coarse, (width, height), interpolation=cv2.INTER_CUBIC)
    tex = cv2.GaussianBlur(tex, (0, 0), sigma)
    tex = (tex - tex.min()) / (tex.max() - tex.min())
    return lo + (hi - lo) * tex


def warp(data: np.ndarray, H: np.ndarray) -> np.ndarray:
    """``out(x) = data(H^-1 x)`` with bilinear sampling and replicated borders."""
    h, w = data.shape
    return cv2.warpPerspective(data, H, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)


def shift_matrix(dx: float, dy: float) -> np.ndarray:
    return np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])


def similarity_about(center, angle_deg: float, scale: float) -> np.ndarray:
    """Rotation by ``angle_deg`` and isotropic ``scale`` that keeps ``center`` fixed."""
    c = np.deg2rad(angle_deg)
    A = scale * np.array([[np.cos(c), -np.sin(c)], [np.sin(c), np.cos(c)]])
    H = np.eye(3)
    H[:2, :2] = A
    H[:2, 2] = np.asarray(center) - A @ np.asarray(center)
    return H


def random_pose(rng: np.random.Generator, angle: float = 0.3, shift: float = 0.2) -> CameraPose:
    return CameraPose(so3_exp(rng.normal(size=3) * angle), rng.normal(size=3) * shift)


def pyramid(data: np.ndarray, levels: int = 3, half_width: int = 5):
    return build_pyramid(GrayImage(np.clip(data, 0.0, 1.0)), levels, 0.5, half_width)


def wave_benchmark(seed: int, frame: int = 8, n_points: int = 150, outlier_frac: float = 0.2, noise_px: float = 0.0, scene=None):
    """Template from frame-0 depth, observations of the true deformed surface at ``frame``.

    The template starts in the true shape of the previous frame, as it would
    after tracking that frame; the initial pose is the truth perturbed by 2
    degrees and 2% of the viewing distance.
    """
    scene = scene or SyntheticSceneConfig(frames=frame + 1, illumination=False, noise_sigma=0.0)
    rng = np.random.default_rng(seed)
    K = scene.intrinsics
    _, depth0 = _intersect(scene, camera_pose(scene, 0), K, 0.0)
    mesh = create_template_from_depth(depth0, K, camera_pose(scene, 0), grid=(10, 10))
    pix = np.stack([rng.uniform(15, scene.width - 16, n_points), rng.uniform(15, scene.height - 16, n_points)], axis=1)
    points = {}
    for i, u in enumerate(pix):
        e = embed_point(mesh, u, K, camera_pose(scene, 0))
        points[i] = MapPoint(i, mesh.id, e, 0, u, None, np.array([0.0, 0.0, -1.0]))

    def shape_at(k):
        V = mesh.rest_vertices.copy()
        V[:, 2] = surface_height(scene, V[:, 0], V[:, 1], k / scene.fps)
        return V

    V_true = shape_at(frame)
    T_true = camera_pose(scene, frame)
    face_idx = np.array([p.embedding.face for p in points.values()])
    bary = np.array([p.embedding.barycentric for p in points.values()])
    obs = K.project(T_true.transform(surface_positions(V_true, mesh.faces, face_idx, bary)))
    obs += rng.normal(scale=noise_px, size=obs.shape) if noise_px > 0 else 0.0
    n_out = int(outlier_frac * n_points)
    outliers = rng.choice(n_points, n_out, replace=False)
    obs[outliers] = np.stack([rng.uniform(0, scene.width - 1, n_out), rng.uniform(0, scene.height - 1, n_out)], axis=1)
    matches = [Match(i, tuple(obs[i])) for i in range(n_points)]
    axis, shift = rng.normal(size=3), rng.normal(size=3)
    T_init = CameraPose(so3_exp(np.deg2rad(2.0) * axis / np.linalg.norm(axis)), 0.02 * scene.surface_distance * shift / np.linalg.norm(shift)) @ T_true
    mesh.current_vertices = shape_at(frame - 1)
    return {
        "scene": scene,
        "K": K,
        "mesh": mesh,
        "local_map": LocalMap(mesh, points, []),
        "matches": matches,
        "obs": obs,
        "T_init": T_init,
        "T_prev": camera_pose(scene, frame - 1),
        "T_true": T_true,
        "V_true": V_true,
        "outliers": outliers,
        "face_idx": face_idx,
        "bary": bary,
    }


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def K():
    return Intrinsics(300.0, 300.0, 159.5, 119.5)


@pytest.fixture(scope="session")
def texture():
    return smooth_texture(120, 160, seed=7)


@pytest.fixture(scope="session")
def acceptance_report():
    return ACCEPTANCE_RESULTS


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
