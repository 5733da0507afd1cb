"""Triangle meshes: OBJ I/O, graph matrices and per-face geometry."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .sparse import SparseMatrix

log = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12

MASK_LABELS = ("lip", "face", "head")


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Vertex positions (N x 3) and counter-clockwise triangles (M x 3)."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise MeshError("vertex coordinates must be finite")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError(f"face index out of range [0, {len(v)})")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise MeshError("face repeats a vertex")
        v.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def with_vertices(self, vertices) -> "TriangleMesh":
        return TriangleMesh(vertices, self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted (i, j) pairs with i < j."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def mean_edge_length(self) -> float:
        e = self.edges()
        return float(np.mean(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)))

    def orientation_conflicts(self) -> int:
        """Number of interior edges traversed in the same direction by both faces."""
        f = self.faces
        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        _, counts = np.unique(directed, axis=0, return_counts=True)
        return int(np.sum(counts > 1))

    def same_topology(self, other: "TriangleMesh") -> bool:
        return self.n_vertices == other.n_vertices and np.array_equal(self.faces, other.faces)


@dataclass(frozen=True)
class VertexMask:
    indices: np.ndarray
    label: str = field(default="head")

    def __post_init__(self):
        idx = np.unique(np.asarray(self.indices, dtype=np.int64))
        if idx.size == 0:
            raise MeshError("vertex mask is empty")
        if idx[0] < 0:
            raise MeshError("negative vertex index in mask")
        object.__setattr__(self, "indices", idx)

    def check(self, n_vertices):
        if self.indices[-1] >= n_vertices:
            raise MeshError(f"mask '{self.label}' index {self.indices[-1]} out of range for {n_vertices} vertices")
        return self


# ---------------------------------------------------------------- I/O

def load_obj(path) -> TriangleMesh:
    """Read the ``v``/``f`` subset of Wavefront OBJ (1-based, triangles only)."""
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshError(f"{path}:{lineno}: malformed vertex line")
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise MeshError(f"{path}:{lineno}: malformed vertex line") from None
            elif tag == "f":
                if len(parts) != 4:
                    raise MeshError(f"{path}:{lineno}: only triangular faces are supported")
                try:
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                except ValueError:
                    raise MeshError(f"{path}:{lineno}: malformed face line") from None
                for i in idx:
                    if i < 1:
                        raise MeshError(f"{path}:{lineno}: face index {i} invalid (OBJ indices are 1-based)")
                faces.append([i - 1 for i in idx])
            elif tag in ("vn", "vt", "s", "o", "g", "usemtl", "mtllib"):
                continue
            else:
                raise MeshError(f"{path}:{lineno}: unsupported line '{tag}'")
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) and faces.max() >= len(verts):
        raise MeshError(f"{path}: face index {faces.max() + 1} exceeds vertex count {len(verts)}")
    mesh = TriangleMesh(np.array(verts).reshape(-1, 3), faces)
    if mesh.orientation_conflicts():
        log.warning("%s: %d edges with inconsistent face orientation", path, mesh.orientation_conflicts())
    return mesh


def save_obj(mesh: TriangleMesh, path):
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def save_mask(mask: VertexMask, path):
    body = "\n".join(str(i) for i in mask.indices)
    Path(path).write_text(f"# mask {mask.label}\n{body}\n")


def load_mask(path) -> VertexMask:
    label = None
    idx = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "mask":
                label = parts[1]
            continue
        idx.append(int(line))
    if label is None:
        raise MeshError(f"{path}: missing '# mask <label>' header")
    return VertexMask(np.array(idx), label)


# ---------------------------------------------------------------- graph

def adjacency(mesh: TriangleMesh) -> SparseMatrix:
    e = mesh.edges()
    n = mesh.n_vertices
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return SparseMatrix.from_coo(rows, cols, np.ones(len(rows)), (n, n))


def degrees(mesh: TriangleMesh) -> np.ndarray:
    return adjacency(mesh).row_sums()


def combinatorial_laplacian(mesh: TriangleMesh) -> SparseMatrix:
    w = adjacency(mesh).to_scipy()
    d = np.asarray(w.sum(axis=1)).ravel()
    return SparseMatrix.from_scipy(sp.diags(d) - w)


def normalized_laplacian(mesh: TriangleMesh) -> SparseMatrix:
    w = adjacency(mesh).to_scipy()
    d = np.asarray(w.sum(axis=1)).ravel()
    if np.any(d == 0):
        raise MeshError(f"isolated vertex {int(np.argmin(d))}: normalized Laplacian undefined")
    inv = sp.diags(1.0 / np.sqrt(d))
    return SparseMatrix.from_scipy(sp.identity(len(d)) - inv @ w @ inv)


def is_connected(mesh: TriangleMesh) -> bool:
    from scipy.sparse.csgraph import connected_components
    n, _ = connected_components(adjacency(mesh).to_scipy(), directed=False)
    return n == 1


# ---------------------------------------------------------------- geometry

def face_geometry(mesh: TriangleMesh):
    """Per-face ``(areas, barycenters, unit_normals, degenerate)``.

    Faces with area below 1e-12 get a zero normal and are flagged in the
    boolean ``degenerate`` array.
    """
    v = mesh.vertices[mesh.faces]
    c = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    length = np.linalg.norm(c, axis=1)
    areas = 0.5 * length
    degenerate = areas < DEGENERATE_AREA
    normals = np.zeros_like(c)
    ok = ~degenerate
    normals[ok] = c[ok] / length[ok, None]
    return areas, v.mean(axis=1), normals, degenerate


def vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    areas, _, normals, _ = face_geometry(mesh)
    out = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(out, mesh.faces[:, k], normals * areas[:, None])
    length = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.where(length > 0, length, 1.0)


# ---------------------------------------------------------------- builders

def icosphere(subdivisions=3, radius=1.0) -> TriangleMesh:
    """Subdivided icosahedron; 10*4**s + 2 vertices (642 at s=3)."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        midpoint = {}
        new_faces = []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriangleMesh(np.array(verts) * radius, np.array(faces))


def random_sphere_mesh(n_vertices, seed=0, jitter=0.0) -> TriangleMesh:
    """Closed triangulation of ``n_vertices`` random points on the unit sphere.

    Points are connected by their convex hull, so every point is a vertex
    and faces are oriented outward.  ``jitter`` scales a radial perturbation
    applied after triangulation.
    """
    from scipy.spatial import ConvexHull

    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((n_vertices, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    hull = ConvexHull(pts)
    faces = hull.simplices.copy()
    if len(hull.vertices) != n_vertices:
        raise MeshError("degenerate point sample; try another seed")
    v = pts[faces]
    outward = np.einsum("ij,ij->i", np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), v.mean(axis=1)) > 0
    faces[~outward] = faces[~outward][:, [0, 2, 1]]
    if jitter:
        pts = pts * (1.0 + jitter * rng.uniform(-1, 1, size=(n_vertices, 1)))
    return TriangleMesh(pts, faces)


def grid_mesh(nx, ny, spacing=1.0) -> TriangleMesh:
    """Flat ``nx`` by ``ny`` vertex grid in the z=0 plane."""
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing, indexing="xy")
    verts = np.stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)], axis=1)
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b, c, d = a + 1, a + nx, a + nx + 1
            faces += [(a, b, d), (a, d, c)]
    return TriangleMesh(verts, np.array(faces))
