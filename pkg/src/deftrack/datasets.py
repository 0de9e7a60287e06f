"""Sequence directories, dynamic-object masks and depth maps on disk.

Directory layout::

    sequence.json          intrinsics, fps, patterns, optional GT poses
    frame_000000.png       8-bit gray or 24-bit color
    mask_000000.png        8-bit, 255 = dynamic (optional, mask_dir)
    depth_000000.png       16-bit millimeters, 0 = invalid (optional, gt_dir)
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import cv2
import numpy as np

from .errors import FrameError, SequenceError
from .geometry import CameraPose, Intrinsics
from .image import GrayImage

FRAME_PATTERN = "frame_%06d.png"
MASK_PATTERN = "mask_%06d.png"
DEPTH_PATTERN = "depth_%06d.png"
METADATA_FILE = "sequence.json"


@dataclass(frozen=True, eq=False)
class DynamicMask:
    """Per-pixel flag, True where a moving object covers the scene."""

    bitmap: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bitmap).astype(bool)
        if b.ndim != 2:
            raise ValueError("mask must be 2-D")
        b.setflags(write=False)
        object.__setattr__(self, "bitmap", b)

    @property
    def width(self) -> int:
        return self.bitmap.shape[1]

    @property
    def height(self) -> int:
        return self.bitmap.shape[0]

    @property
    def area(self) -> int:
        return int(self.bitmap.sum())

    @classmethod
    def empty(cls, width: int, height: int) -> "DynamicMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def full(cls, width: int, height: int) -> "DynamicMask":
        return cls(np.ones((height, width), dtype=bool))

    @classmethod
    def from_uint8(cls, array: np.ndarray) -> "DynamicMask":
        a = np.asarray(array)
        if a.ndim == 3:
            a = a[..., 0]
        return cls(a >= 128)

    def to_uint8(self) -> np.ndarray:
        return np.where(self.bitmap, 255, 0).astype(np.uint8)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """True for (N, 2) pixel positions whose nearest pixel is dynamic or off-image."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        xi = np.rint(p[:, 0]).astype(np.intp)
        yi = np.rint(p[:, 1]).astype(np.intp)
        inside = (xi >= 0) & (xi < self.width) & (yi >= 0) & (yi < self.height)
        out = np.ones(len(p), dtype=bool)
        out[inside] = self.bitmap[yi[inside], xi[inside]]
        return out


def disc_offsets(radius: int) -> np.ndarray:
    r = int(radius)
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    keep = dx * dx + dy * dy <= r * r
    return np.stack([dx[keep], dy[keep]], axis=-1)


def dilate_mask(mask: DynamicMask, radius: int) -> DynamicMask:
    """Morphological dilation with a disc of the given radius."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return DynamicMask(mask.bitmap.copy())
    r = int(radius)
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    kernel = (dx * dx + dy * dy <= r * r).astype(np.uint8)
    out = cv2.dilate(mask.bitmap.astype(np.uint8), kernel, borderType=cv2.BORDER_CONSTANT, borderValue=0)
    return DynamicMask(out.astype(bool))


@dataclass
class SequenceConfig:
    image_dir: Path
    intrinsics: Intrinsics
    frame_pattern: str = FRAME_PATTERN
    mask_dir: Optional[Path] = None
    gt_dir: Optional[Path] = None
    fps: float = 30.0
    mask_pattern: str = MASK_PATTERN
    depth_pattern: str = DEPTH_PATTERN
    gt_poses: Optional[list] = None
    image_size: Optional[tuple[int, int]] = None

    def __post_init__(self):
        self.image_dir = Path(self.image_dir)
        self.mask_dir = None if self.mask_dir is None else Path(self.mask_dir)
        self.gt_dir = None if self.gt_dir is None else Path(self.gt_dir)
        if self.image_size is not None:
            w, h = self.image_size
            k = self.intrinsics
            if not (0 <= k.cx <= w and 0 <= k.cy <= h):
                raise ValueError("principal point outside the image")

    @classmethod
    def from_directory(cls, root) -> "SequenceConfig":
        """Read ``sequence.json`` written by :func:`write_sequence` or by hand."""
        root = Path(root)
        meta_path = root / METADATA_FILE
        if not meta_path.exists():
            raise SequenceError(f"{meta_path} not found")
        meta = json.loads(meta_path.read_text())
        intr = Intrinsics(**meta["intrinsics"])
        mask_dir = meta.get("mask_dir")
        gt_dir = meta.get("gt_dir")
        poses = meta.get("poses")
        return cls(
            image_dir=root / meta.get("image_dir", "."),
            intrinsics=intr,
            frame_pattern=meta.get("frame_pattern", FRAME_PATTERN),
            mask_dir=None if mask_dir is None else root / mask_dir,
            gt_dir=None if gt_dir is None else root / gt_dir,
            fps=float(meta.get("fps", 30.0)),
            gt_poses=None if poses is None else [CameraPose.from_matrix(np.array(T)) for T in poses],
            image_size=tuple(meta["image_size"]) if "image_size" in meta else None,
        )


@dataclass
class SequenceFrame:
    index: int
    image: GrayImage
    mask: Optional[DynamicMask] = None
    depth: Optional[np.ndarray] = None
    pose: Optional[CameraPose] = None


def _pattern_regex(pattern: str) -> re.Pattern:
    """Turn a printf template such as ``frame_%06d.png`` into a regex capturing the index."""
    m = re.search(r"%0?(\d*)d", pattern)
    if m is None:
        raise SequenceError(f"pattern {pattern!r} has no integer field")
    head, tail = pattern[: m.start()], pattern[m.end() :]
    return re.compile("^" + re.escape(head) + r"(\d+)" + re.escape(tail) + "$")


def read_image(path: Path, frame_id) -> GrayImage:
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise FrameError(frame_id, f"cannot decode {path}")
    if data.dtype == np.uint16:
        data = (data // 257).astype(np.uint8)
    return GrayImage.from_uint8(data, channel_order="bgr")


def write_depth_png(path, depth_m: np.ndarray) -> None:
    d = np.asarray(depth_m, dtype=np.float64)
    mm = np.where(np.isfinite(d) & (d > 0), np.rint(d * 1000.0), 0)
    cv2.imwrite(str(path), np.clip(mm, 0, 65535).astype(np.uint16))


def read_depth_png(path) -> np.ndarray:
    """Depth in meters; invalid pixels become NaN."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FrameError(str(path), "cannot decode depth map")
    depth = raw.astype(np.float64) / 1000.0
    depth[raw == 0] = np.nan
    return depth


def load_sequence(cfg: SequenceConfig) -> Iterator[SequenceFrame]:
    """Yield frames in lexicographic filename order with optional mask/depth."""
    if not cfg.image_dir.is_dir():
        raise SequenceError(f"{cfg.image_dir} is not a directory")
    regex = _pattern_regex(cfg.frame_pattern)
    names = sorted(p.name for p in cfg.image_dir.iterdir() if regex.match(p.name))
    if not names:
        raise SequenceError(f"no frames matching {cfg.frame_pattern!r} in {cfg.image_dir}")
    for name in names:
        index = int(regex.match(name).group(1))
        image = read_image(cfg.image_dir / name, index)
        mask = None
        if cfg.mask_dir is not None:
            mp = cfg.mask_dir / (cfg.mask_pattern % index)
            if mp.exists():
                raw = cv2.imread(str(mp), cv2.IMREAD_UNCHANGED)
                if raw is None:
                    raise FrameError(index, f"cannot decode mask {mp}")
                mask = DynamicMask.from_uint8(raw)
        depth = None
        if cfg.gt_dir is not None:
            dp = cfg.gt_dir / (cfg.depth_pattern % index)
            if dp.exists():
                depth = read_depth_png(dp)
        pose = None
        if cfg.gt_poses is not None and index < len(cfg.gt_poses):
            pose = cfg.gt_poses[index]
        yield SequenceFrame(index, image, mask, depth, pose)


def write_sequence(
    out_dir,
    frames,
    intrinsics: Intrinsics,
    masks=None,
    depths=None,
    poses=None,
    fps: float = 30.0,
    extra: Optional[dict] = None,
) -> Path:
    """Write frames (and optional masks, depths, GT poses) in the canonical layout."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(frames):
        cv2.imwrite(str(out / (FRAME_PATTERN % k)), frame.to_uint8())
        if masks is not None and masks[k] is not None:
            cv2.imwrite(str(out / (MASK_PATTERN % k)), masks[k].to_uint8())
        if depths is not None and depths[k] is not None:
            write_depth_png(out / (DEPTH_PATTERN % k), depths[k])
    meta = {
        "intrinsics": intrinsics.to_dict(),
        "fps": fps,
        "frame_pattern": FRAME_PATTERN,
        "image_dir": ".",
        "image_size": [frames[0].width, frames[0].height],
    }
    if masks is not None:
        meta["mask_dir"] = "."
    if depths is not None:
        meta["gt_dir"] = "."
    if poses is not None:
        meta["poses"] = [p.matrix().tolist() for p in poses]
    if extra:
        meta.update(extra)
    (out / METADATA_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out
