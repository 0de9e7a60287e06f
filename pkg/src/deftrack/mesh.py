"""Triangular surface templates and their deformation energy.

A template stores a shape-at-rest and a current (deformed) state over the
same connectivity. Map points live on the surface through barycentric
embeddings, so their positions are linear in the vertex coordinates.

The deformation energy is

    E = ls * sum_edges ((|vi - vj| - r_ij) / r_ij)^2
      + lb * sum_vertices |L(v) - L(v_rest)|^2

with L the uniform-weight Laplacian.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateGeometryError, RayMissError, TemplateCreationError
from .geometry import CameraPose, Intrinsics
from .image import Patch

DEFAULT_STRETCH_WEIGHT = 10.0
DEFAULT_BEND_WEIGHT = 2.0


def _unique_edges(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    pairs = np.sort(pairs, axis=1)
    edges, counts = np.unique(pairs, axis=0, return_counts=True)
    return edges, counts


def uniform_laplacian(n_vertices: int, edges: np.ndarray) -> sp.csr_matrix:
    """L v_i = v_i - mean of the 1-ring neighbours of v_i."""
    i = np.concatenate([edges[:, 0], edges[:, 1]])
    j = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sp.csr_matrix((np.ones(len(i)), (i, j)), shape=(n_vertices, n_vertices))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return (sp.identity(n_vertices, format="csr") - sp.diags(inv) @ adj).tocsr()


@dataclass(eq=False)
class TemplateMesh:
    rest_vertices: np.ndarray
    current_vertices: np.ndarray
    faces: np.ndarray
    stretch_weight: float = DEFAULT_STRETCH_WEIGHT
    bend_weight: float = DEFAULT_BEND_WEIGHT
    id: int = 0
    edges: np.ndarray = field(init=False)
    rest_lengths: np.ndarray = field(init=False)
    laplacian: sp.csr_matrix = field(init=False, repr=False)
    rest_laplacian: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.rest_vertices = np.array(self.rest_vertices, dtype=np.float64).reshape(-1, 3)
        self.current_vertices = np.array(self.current_vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        n = len(self.rest_vertices)
        if len(self.current_vertices) != n:
            raise ValueError("rest and current vertex counts differ")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise IndexError("face references a missing vertex")
        self.edges, counts = _unique_edges(self.faces)
        if np.any(counts > 2):
            raise ValueError("mesh is not edge-manifold")
        self.rest_lengths = np.linalg.norm(
            self.rest_vertices[self.edges[:, 0]] - self.rest_vertices[self.edges[:, 1]], axis=1
        )
        if np.any(self.rest_lengths <= 0):
            raise DegenerateGeometryError("zero-length rest edge")
        self.laplacian = uniform_laplacian(n, self.edges)
        self.rest_laplacian = self.laplacian @ self.rest_vertices

    @property
    def n_vertices(self) -> int:
        return len(self.rest_vertices)

    def copy(self) -> "TemplateMesh":
        return TemplateMesh(
            self.rest_vertices.copy(),
            self.current_vertices.copy(),
            self.faces.copy(),
            self.stretch_weight,
            self.bend_weight,
            self.id,
        )

    def with_weights(self, stretch_weight: float, bend_weight: float) -> "TemplateMesh":
        out = self.copy()
        out.stretch_weight = stretch_weight
        out.bend_weight = bend_weight
        return out

    def extent(self, state: str = "rest") -> float:
        """Diagonal of the axis-aligned bounding box."""
        v = self.rest_vertices if state == "rest" else self.current_vertices
        return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))


@dataclass(frozen=True)
class SurfaceEmbedding:
    face: int
    barycentric: tuple[float, float, float]

    def __post_init__(self):
        b = np.asarray(self.barycentric, dtype=np.float64)
        if b.shape != (3,) or np.any(b < -1e-12) or abs(b.sum() - 1.0) > 1e-9:
            raise ValueError(f"invalid barycentric coordinates {b}")


@dataclass(eq=False)
class MapPoint:
    """A tracked surface point anchored in a keyframe.

    ``anchor_pixel`` is where the point was observed in its anchor keyframe;
    ``reference_patch`` is the level-0 patch sampled there.
    """

    id: int
    template_id: int
    embedding: SurfaceEmbedding
    anchor_keyframe: int
    anchor_pixel: np.ndarray
    reference_patch: Optional[Patch]
    rest_normal: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.rest_normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-6:
            raise ValueError("rest_normal must be unit length")
        self.rest_normal = n
        self.anchor_pixel = np.asarray(self.anchor_pixel, dtype=np.float64)


def _fill_invalid(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace invalid grid nodes by the mean of valid 4-neighbours, repeatedly."""
    values = values.copy()
    valid = valid.copy()
    rows, cols = values.shape
    while not valid.all():
        new_valid = valid.copy()
        updates = {}
        for r, c in zip(*np.nonzero(~valid)):
            nb = [
                values[rr, cc]
                for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1))
                if 0 <= rr < rows and 0 <= cc < cols and valid[rr, cc]
            ]
            if nb:
                updates[(r, c)] = float(np.mean(nb))
                new_valid[r, c] = True
        if not updates:
            raise TemplateCreationError("no valid depth to interpolate from")
        for (r, c), v in updates.items():
            values[r, c] = v
        valid = new_valid
    return values


def grid_faces(rows: int, cols: int) -> np.ndarray:
    """Two triangles per grid cell, diagonals alternating in a checkerboard."""
    faces = []
    for r in range(rows - 1):
        for c in range(cols - 1):
            a = r * cols + c
            b = a + 1
            d = a + cols
            e = d + 1
            if (r + c) % 2 == 0:
                faces += [(a, b, e), (a, e, d)]
            else:
                faces += [(a, b, d), (b, e, d)]
    return np.array(faces, dtype=np.int64)


def create_template_from_depth(
    depth: np.ndarray,
    K: Intrinsics,
    pose: CameraPose,
    grid: tuple[int, int] = (10, 10),
    stretch_weight: float = DEFAULT_STRETCH_WEIGHT,
    bend_weight: float = DEFAULT_BEND_WEIGHT,
    template_id: int = 0,
    margin: float = 0.0,
) -> TemplateMesh:
    """Back-project a regular grid of depth samples into a world-frame mesh.

    Nodes span the image (optionally inset by ``margin`` pixels). Invalid
    node depths are filled from valid neighbours; more than 30% invalid
    nodes is an error. Faces are oriented toward the creating camera.
    """
    rows, cols = grid
    if rows < 2 or cols < 2:
        raise ValueError("grid must be at least 2x2")
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    xs = np.linspace(margin, w - 1 - margin, cols)
    ys = np.linspace(margin, h - 1 - margin, rows)
    gx, gy = np.meshgrid(xs, ys)
    values = np.empty((rows, cols))
    valid = np.zeros((rows, cols), dtype=bool)
    for r in range(rows):
        for c in range(cols):
            x, y = gx[r, c], gy[r, c]
            x0, y0 = int(np.floor(x)), int(np.floor(y))
            x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
            quad = depth[[y0, y0, y1, y1], [x0, x1, x0, x1]]
            if np.all(np.isfinite(quad)) and np.all(quad > 0):
                fx, fy = x - x0, y - y0
                values[r, c] = (
                    quad[0] * (1 - fx) * (1 - fy) + quad[1] * fx * (1 - fy) + quad[2] * (1 - fx) * fy + quad[3] * fx * fy
                )
                valid[r, c] = True
    if (~valid).sum() > 0.3 * valid.size:
        raise TemplateCreationError(f"{(~valid).sum()} of {valid.size} grid nodes have invalid depth")
    values = _fill_invalid(values, valid)
    pixels = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    points_c = K.backproject(pixels, values.ravel())
    points_w = pose.inverse().transform(points_c)
    faces = grid_faces(rows, cols)
    center = pose.center
    tri = points_w[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", n, center - tri.mean(axis=1)) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return TemplateMesh(points_w, points_w.copy(), faces, stretch_weight, bend_weight, template_id)


def ray_mesh_intersections(vertices: np.ndarray, faces: np.ndarray, origin: np.ndarray, direction: np.ndarray):
    """Moller-Trumbore against every face. Returns (t, u, v, hit) arrays."""
    tri = vertices[faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    p = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > 1e-14
    inv = np.divide(1.0, det, out=np.zeros_like(det), where=ok)
    s = origin - tri[:, 0]
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    v = (q @ direction) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    eps = 1e-10
    hit = ok & (u >= -eps) & (v >= -eps) & (u + v <= 1.0 + eps) & (t > 0)
    return t, u, v, hit


def embed_point(mesh: TemplateMesh, pixel, K: Intrinsics, pose: CameraPose) -> SurfaceEmbedding:
    """Embed the nearest intersection of the pixel's viewing ray with the current mesh."""
    origin = pose.center
    direction = pose.rotation.T @ K.rays(np.asarray(pixel, dtype=np.float64))
    t, u, v, hit = ray_mesh_intersections(mesh.current_vertices, mesh.faces, origin, direction)
    if not hit.any():
        raise RayMissError(f"pixel {tuple(pixel)} does not hit template {mesh.id}")
    k = np.flatnonzero(hit)[np.argmin(t[hit])]
    b = np.clip(np.array([1.0 - u[k] - v[k], u[k], v[k]]), 0.0, None)
    b /= b.sum()
    return SurfaceEmbedding(int(k), tuple(float(x) for x in b))


def surface_position(mesh: TemplateMesh, e: SurfaceEmbedding, state: str = "current") -> np.ndarray:
    if not 0 <= e.face < len(mesh.faces):
        raise IndexError(f"face {e.face} out of range")
    V = mesh.current_vertices if state == "current" else mesh.rest_vertices
    return np.asarray(e.barycentric) @ V[mesh.faces[e.face]]


def surface_positions(vertices: np.ndarray, faces: np.ndarray, face_idx: np.ndarray, bary: np.ndarray) -> np.ndarray:
    """Vectorized barycentric evaluation: (M,) faces and (M, 3) weights."""
    return np.einsum("mk,mkj->mj", bary, vertices[faces[face_idx]])


def face_normals(mesh: TemplateMesh, state: str = "current") -> np.ndarray:
    V = mesh.current_vertices if state == "current" else mesh.rest_vertices
    tri = V[mesh.faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def face_normal(mesh: TemplateMesh, face: int, state: str = "current") -> np.ndarray:
    """Unit normal, oriented toward the camera that created the template."""
    V = mesh.current_vertices if state == "current" else mesh.rest_vertices
    a, b, c = V[mesh.faces[face]]
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n)
    if 0.5 * norm <= 1e-12:
        raise DegenerateGeometryError(f"face {face} has zero area")
    return n / norm


def stretch_terms(mesh: TemplateMesh, vertices: Optional[np.ndarray] = None):
    """Unweighted edge strains (|vi - vj| - r) / r and d strain / d vi.

    The derivative w.r.t. vj is the negative of the one returned.
    """
    V = mesh.current_vertices if vertices is None else vertices
    diff = V[mesh.edges[:, 0]] - V[mesh.edges[:, 1]]
    length = np.linalg.norm(diff, axis=1)
    strain = (length - mesh.rest_lengths) / mesh.rest_lengths
    d_strain = diff / (length * mesh.rest_lengths)[:, None]
    return strain, d_strain


def bending_terms(mesh: TemplateMesh, vertices: Optional[np.ndarray] = None) -> np.ndarray:
    V = mesh.current_vertices if vertices is None else vertices
    return mesh.laplacian @ V - mesh.rest_laplacian


def deformation_energy(mesh: TemplateMesh, vertices: Optional[np.ndarray] = None):
    """Stretching plus bending energy and its gradient (N, 3)."""
    V = mesh.current_vertices if vertices is None else np.asarray(vertices, dtype=np.float64)
    strain, d_strain = stretch_terms(mesh, V)
    bend = bending_terms(mesh, V)
    value = mesh.stretch_weight * float(strain @ strain) + mesh.bend_weight * float(np.sum(bend * bend))
    grad = np.zeros_like(V)
    g_edge = (2.0 * mesh.stretch_weight * strain)[:, None] * d_strain
    np.add.at(grad, mesh.edges[:, 0], g_edge)
    np.add.at(grad, mesh.edges[:, 1], -g_edge)
    grad += 2.0 * mesh.bend_weight * (mesh.laplacian.T @ bend)
    return value, grad


def write_ply(path, mesh: TemplateMesh, state: str = "current") -> None:
    V = mesh.current_vertices if state == "current" else mesh.rest_vertices
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(V)}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in V]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    text = Path(path).read_text().splitlines()
    end = text.index("end_header")
    n_v = n_f = 0
    for line in text[:end]:
        if line.startswith("element vertex"):
            n_v = int(line.split()[-1])
        elif line.startswith("element face"):
            n_f = int(line.split()[-1])
    body = text[end + 1 :]
    V = np.array([[float(t) for t in line.split()] for line in body[:n_v]]).reshape(-1, 3)
    F = np.array([[int(t) for t in line.split()[1:]] for line in body[n_v : n_v + n_f]]).reshape(-1, 3)
    return V, F
