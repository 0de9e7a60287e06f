"""Map containers shared by tracking, optimization and relocalization."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import CameraPose
from .image import ImagePyramid
from .mesh import MapPoint, TemplateMesh, surface_position


class MatchSource(str, enum.Enum):
    PREVIOUS_FRAME = "PreviousFrame"
    LOCAL_MAP_REPROJECTION = "LocalMapReprojection"
    RELOCALIZATION = "Relocalization"


@dataclass(frozen=True)
class Match:
    map_point: int
    observation: tuple[float, float]
    flow_source: MatchSource = MatchSource.PREVIOUS_FRAME
    weight: float = 1.0

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError("match weight must be positive")


@dataclass(eq=False)
class KeyframeRecord:
    """Everything relocalization needs about one keyframe.

    ``associations`` maps a row of ``descriptors`` to the map point it
    observes; ``template_rest``/``template_current`` snapshot the template
    at insertion time.
    """

    id: int
    frame_index: int
    pose: CameraPose
    keypoints: np.ndarray  # (K, 2) pixels
    descriptors: np.ndarray  # (K, 32) uint8
    bow: dict
    template_id: int
    template_rest: np.ndarray
    template_current: np.ndarray
    associations: dict
    observed_points: set
    pyramid: Optional[ImagePyramid] = None


@dataclass(eq=False)
class LocalMap:
    template: Optional[TemplateMesh]
    points: dict  # id -> MapPoint, ordered by id
    covisible_keyframes: list

    def __len__(self) -> int:
        return len(self.points)

    def on_template(self) -> list[MapPoint]:
        if self.template is None:
            return []
        return [p for p in self.points.values() if p.template_id == self.template.id]


@dataclass(eq=False)
class Map:
    templates: dict = field(default_factory=dict)
    points: dict = field(default_factory=dict)
    keyframes: dict = field(default_factory=dict)
    current_template: Optional[int] = None
    _next_point: int = 0
    _next_keyframe: int = 0
    _next_template: int = 0

    def add_template(self, mesh: TemplateMesh) -> TemplateMesh:
        mesh.id = self._next_template
        self._next_template += 1
        self.templates[mesh.id] = mesh
        self.current_template = mesh.id
        return mesh

    def new_point_id(self) -> int:
        self._next_point += 1
        return self._next_point - 1

    def new_keyframe_id(self) -> int:
        self._next_keyframe += 1
        return self._next_keyframe - 1

    def add_point(self, point: MapPoint) -> None:
        self.points[point.id] = point

    def point_position(self, point_id: int) -> np.ndarray:
        p = self.points[point_id]
        return surface_position(self.templates[p.template_id], p.embedding)

    @property
    def template(self) -> Optional[TemplateMesh]:
        if self.current_template is None:
            return None
        return self.templates[self.current_template]
