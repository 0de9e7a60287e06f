"""Synthetic deforming-surface sequences with exact ground truth.

The scene is a textured heightfield travelling-wave surface

    z(x, y, t) = z0 + A * sin(2 pi (x - v t) / wavelength)

in world coordinates, seen by a pinhole camera that starts at the world
origin looking down +z. Material points keep their (x, y) and only move in
z, so texture is indexed by (x, y) and scene flow is exact. Images get a
moving endoscope-like light (spatially varying gain and bias), optional
sensor noise, an optional rectangular "tool" with its mask, and optional
fully occluded frames.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import cv2
import numpy as np

from .datasets import DynamicMask
from .errors import GenerationError
from .geometry import CameraPose, Intrinsics, so3_exp
from .image import GrayImage, bilinear


@dataclass(frozen=True)
class SyntheticSceneConfig:
    width: int = 320
    height: int = 240
    focal: float = 300.0
    frames: int = 30
    fps: float = 30.0
    seed: int = 0
    texture: str = "mandala"  # or "noise"
    texel_size: float = 1.0e-3
    surface_distance: float = 0.5
    surface_half_extent: float = 0.6
    amplitude: float = 0.015
    wavelength: float = 0.25
    wave_speed: float = 0.15
    # Camera path: center (rx sin(wt), ry (1 - cos(wt)), rz sin(2wt)), w = 2 pi / period.
    path_radius: tuple[float, float, float] = (0.08, 0.04, 0.02)
    path_period: int = 30
    rotation_amplitude_deg: float = 2.0
    noise_sigma: float = 0.002
    illumination: bool = True
    light_gain: float = 0.3
    light_bias: float = 0.03
    light_radius: float = 220.0
    tool: bool = False
    tool_size: tuple[int, int] = (60, 36)
    tool_start: tuple[float, float] = (20.0, 150.0)
    tool_velocity: tuple[float, float] = (6.0, -1.5)
    occluded_frames: tuple[int, ...] = ()

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if self.frames < 2:
            raise ValueError("at least 2 frames required")

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal, (self.width - 1) / 2.0, (self.height - 1) / 2.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneConfig":
        names = cls.__dataclass_fields__
        unknown = set(d) - set(names)
        if unknown:
            raise ValueError(f"unknown synthetic scene fields: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass(eq=False)
class GroundTruthFrame:
    """Per-pixel world points (NaN where invalid), depth, pose, flow to next frame."""

    points: np.ndarray
    depth: np.ndarray
    pose: CameraPose
    flow: Optional[np.ndarray] = None


@dataclass(eq=False)
class SyntheticSequence:
    config: SyntheticSceneConfig
    intrinsics: Intrinsics
    frames: list
    masks: list
    ground_truth: list
    initial_depth: np.ndarray
    texture: np.ndarray = field(repr=False)

    def surface_height(self, x, y, frame: int):
        return surface_height(self.config, x, y, frame / self.config.fps)

    def material_positions(self, points_w0: np.ndarray, frame: int) -> np.ndarray:
        """Where material points (given at frame 0) are at ``frame``."""
        p = np.asarray(points_w0, dtype=np.float64).copy()
        p[..., 2] = self.surface_height(p[..., 0], p[..., 1], frame)
        return p

    @property
    def poses(self) -> list:
        return [g.pose for g in self.ground_truth]


def surface_height(cfg: SyntheticSceneConfig, x, y, t: float):
    return cfg.surface_distance + cfg.amplitude * np.sin(2.0 * np.pi * (np.asarray(x) - cfg.wave_speed * t) / cfg.wavelength)


def _surface_slope(cfg: SyntheticSceneConfig, x, t: float):
    k = 2.0 * np.pi / cfg.wavelength
    return cfg.amplitude * k * np.cos(k * (np.asarray(x) - cfg.wave_speed * t))


def camera_pose(cfg: SyntheticSceneConfig, frame: int) -> CameraPose:
    """Ground-truth world-to-camera pose; frame 0 is the identity."""
    w = 2.0 * np.pi / cfg.path_period
    rx, ry, rz = cfg.path_radius
    c = np.array([rx * np.sin(w * frame), ry * (1.0 - np.cos(w * frame)), rz * np.sin(2.0 * w * frame)])
    a = np.deg2rad(cfg.rotation_amplitude_deg)
    R_wc = so3_exp(np.array([a * np.sin(w * frame), a * np.sin(w * frame + 1.0) - a * np.sin(1.0), 0.5 * a * np.sin(w * frame)]))
    R_cw = R_wc.T
    return CameraPose(R_cw, -R_cw @ c)


def make_texture(cfg: SyntheticSceneConfig) -> np.ndarray:
    """Procedural texture over [-E, E]^2 in [0.1, 0.9]."""
    rng = np.random.default_rng(cfg.seed)
    n = int(round(2.0 * cfg.surface_half_extent / cfg.texel_size)) + 1
    tex = np.zeros((n, n))
    total = 0.0
    for cell, amp in ((96, 1.0), (48, 0.7), (24, 0.5), (12, 0.4), (6, 0.25)):
        g = max(2, n // cell + 2)
        coarse = rng.random((g, g))
        up = cv2.resize(coarse, (n, n), interpolation=cv2.INTER_CUBIC)
        tex += amp * up
        total += amp
    tex /= total
    tex = cv2.GaussianBlur(tex, (0, 0), 1.2)
    if cfg.texture == "mandala":
        coords = (np.arange(n) * cfg.texel_size) - cfg.surface_half_extent
        X, Y = np.meshgrid(coords, coords)
        r = np.hypot(X, Y)
        phi = np.arctan2(Y, X)
        rings = 0.5 + 0.5 * np.cos(2.0 * np.pi * r / 0.04) * np.cos(8.0 * phi)
        # Rings dominate near the centre and fade out, leaving smoother noise outside.
        blend = 0.45 * np.exp(-((r / 0.15) ** 2))
        tex = (1.0 - blend) * tex + blend * rings
    elif cfg.texture != "noise":
        raise ValueError(f"unknown texture type {cfg.texture!r}")
    lo, hi = np.percentile(tex, [0.5, 99.5])
    return np.clip(0.1 + 0.8 * (tex - lo) / (hi - lo), 0.0, 1.0)


def _intersect(cfg: SyntheticSceneConfig, pose: CameraPose, K: Intrinsics, t: float):
    h, w = cfg.height, cfg.width
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    rays_c = K.rays(np.stack([u, v], axis=-1))
    d = rays_c @ pose.rotation  # R^T applied to each ray
    c = pose.center
    s = (cfg.surface_distance - c[2]) / d[..., 2]
    for _ in range(50):
        x = c[0] + s * d[..., 0]
        y = c[1] + s * d[..., 1]
        f = c[2] + s * d[..., 2] - surface_height(cfg, x, y, t)
        fp = d[..., 2] - _surface_slope(cfg, x, t) * d[..., 0]
        step = f / fp
        s = s - step
        if np.max(np.abs(step)) < 1e-14:
            break
    points = c + s[..., None] * d
    return points, s


def render_frame(cfg: SyntheticSceneConfig, texture: np.ndarray, frame: int, illumination: Optional[bool] = None):
    """Render one frame: (image array, mask or None, GT points, depth)."""
    K = cfg.intrinsics
    pose = camera_pose(cfg, frame)
    t = frame / cfg.fps
    points, depth = _intersect(cfg, pose, K, t)
    E = cfg.surface_half_extent
    margin = 2.0 * cfg.texel_size
    if np.any(np.abs(points[..., :2]) > E - margin) or np.any(depth <= 0) or not np.all(np.isfinite(points)):
        raise GenerationError(f"frame {frame}: view leaves the synthetic surface")
    tx = (points[..., 0] + E) / cfg.texel_size
    ty = (points[..., 1] + E) / cfg.texel_size
    img = bilinear(texture, tx, ty)
    lit = cfg.illumination if illumination is None else illumination
    if lit:
        w = 2.0 * np.pi / cfg.path_period
        hx = cfg.width * (0.5 + 0.25 * np.cos(1.3 * w * frame))
        hy = cfg.height * (0.5 + 0.25 * np.sin(1.3 * w * frame))
        v, u = np.mgrid[0 : cfg.height, 0 : cfg.width].astype(np.float64)
        theta = np.pi * np.minimum(np.hypot(u - hx, v - hy) / cfg.light_radius, 1.0)
        img = (1.0 + cfg.light_gain * np.cos(theta)) * img + cfg.light_bias * np.cos(theta)
    if cfg.noise_sigma > 0:
        rng = np.random.default_rng([cfg.seed, frame])
        img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
    mask = None
    if cfg.tool or cfg.occluded_frames:
        bitmap = np.zeros((cfg.height, cfg.width), dtype=bool)
        if frame in cfg.occluded_frames:
            bitmap[:] = True
            v, u = np.mgrid[0 : cfg.height, 0 : cfg.width]
            img = 0.25 + 0.05 * np.sin(u / 37.0) * np.cos(v / 29.0)
        elif cfg.tool:
            x0 = cfg.tool_start[0] + cfg.tool_velocity[0] * frame
            y0 = cfg.tool_start[1] + cfg.tool_velocity[1] * frame
            tw, th = cfg.tool_size
            xs = slice(max(0, int(round(x0))), max(0, min(cfg.width, int(round(x0 + tw)))))
            ys = slice(max(0, int(round(y0))), max(0, min(cfg.height, int(round(y0 + th)))))
            bitmap[ys, xs] = True
            v, u = np.mgrid[0 : cfg.height, 0 : cfg.width]
            metal = 0.75 + 0.15 * np.sin((u - x0) / 3.0)
            img = np.where(bitmap, metal, img)
        mask = DynamicMask(bitmap)
    return np.clip(img, 0.0, 1.0), mask, points, depth


def generate_synthetic_sequence(cfg: SyntheticSceneConfig) -> SyntheticSequence:
    """Render a full sequence with per-pixel ground truth and scene flow."""
    K = cfg.intrinsics
    texture = make_texture(cfg)
    frames, masks, gts = [], [], []
    for k in range(cfg.frames):
        img, mask, points, depth = render_frame(cfg, texture, k)
        frames.append(GrayImage(img))
        masks.append(mask)
        gts.append(GroundTruthFrame(points=points, depth=depth, pose=camera_pose(cfg, k)))
    for k in range(cfg.frames - 1):
        nxt = gts[k + 1].pose
        moved = gts[k].points.copy()
        moved[..., 2] = surface_height(cfg, moved[..., 0], moved[..., 1], (k + 1) / cfg.fps)
        proj = K.project(nxt.transform(moved))
        v, u = np.mgrid[0 : cfg.height, 0 : cfg.width].astype(np.float64)
        gts[k].flow = proj - np.stack([u, v], axis=-1)
    return SyntheticSequence(cfg, K, frames, masks, gts, gts[0].depth.copy(), texture)
