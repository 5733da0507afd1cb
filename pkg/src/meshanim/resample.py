"""Multi-scale mesh hierarchies for pooling and unpooling.

Coarse levels come from greedy quadric-error edge collapse in which every
collapse keeps one of the two endpoints, so the coarse vertex set is a
subset of the fine one and downsampling is a 0/1 selection matrix.
Upsampling writes each fine vertex as barycentric weights of the closest
point on its nearest coarse triangle.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .mesh import DEGENERATE_AREA, MeshError, TriangleMesh, face_geometry, is_connected, normalized_laplacian
from .sparse import SparseMatrix, power_iteration


class DecimationError(MeshError):
    def __init__(self, message, achieved):
        super().__init__(message)
        self.achieved = achieved


@dataclass(frozen=True, eq=False)
class ResampleLevel:
    mesh: TriangleMesh  # the coarse mesh
    down: SparseMatrix  # n x m selection
    up: SparseMatrix  # m x n barycentric
    kept: np.ndarray  # fine indices of coarse vertices


@dataclass(frozen=True, eq=False)
class Hierarchy:
    meshes: list  # finest -> coarsest
    levels: list  # ResampleLevel from meshes[k] to meshes[k+1]
    laplacians: list = field(default_factory=list)
    lambda_max: list = field(default_factory=list)
    scaled: list = field(default_factory=list)

    @property
    def sizes(self):
        return [m.n_vertices for m in self.meshes]

    @property
    def depth(self):
        return len(self.levels)


# ---------------------------------------------------------------- quadrics

def _plane_quadrics(mesh: TriangleMesh, boundary_weight: float):
    """Per-vertex quadrics (N x 4 x 4) and the set of boundary edges."""
    v, f = mesh.vertices, mesh.faces
    areas, _, normals, _ = face_geometry(mesh)
    d = -np.einsum("ij,ij->i", normals, v[f[:, 0]])
    planes = np.concatenate([normals, d[:, None]], axis=1)
    kf = areas[:, None, None] * planes[:, :, None] * planes[:, None, :]
    q = np.zeros((len(v), 4, 4))
    for k in range(3):
        np.add.at(q, f[:, k], kf)

    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    owner = np.tile(np.arange(len(f)), 3)
    key = np.sort(directed, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    on_boundary = counts[inverse.ravel()] == 1
    boundary = set()
    if boundary_weight > 0 and np.any(on_boundary):
        a, b = directed[on_boundary, 0], directed[on_boundary, 1]
        edge = v[b] - v[a]
        n = np.cross(edge, normals[owner[on_boundary]])
        length = np.linalg.norm(n, axis=1)
        ok = length > 0
        n[ok] /= length[ok, None]
        dd = -np.einsum("ij,ij->i", n, v[a])
        p = np.concatenate([n, dd[:, None]], axis=1)
        w = boundary_weight * np.einsum("ij,ij->i", edge, edge)
        kb = w[:, None, None] * p[:, :, None] * p[:, None, :]
        np.add.at(q, a, kb)
        np.add.at(q, b, kb)
    for a, b in directed[on_boundary]:
        boundary.add((min(a, b), max(a, b)))
    return q, boundary


def _collapse_costs(q, homog, src, dst):
    """Cost of merging ``src`` into ``dst`` (kept): dst^T (Q_src + Q_dst) dst."""
    p = homog[dst]
    qs = q[src] + q[dst]
    return np.einsum("ni,nij,nj->n", p, qs, p)


def edge_collapse_costs(mesh: TriangleMesh, boundary_weight=10.0):
    """Initial directed collapse costs as ``(src, dst, cost)`` arrays."""
    q, _ = _plane_quadrics(mesh, boundary_weight)
    e = mesh.edges()
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    homog = np.concatenate([mesh.vertices, np.ones((mesh.n_vertices, 1))], axis=1)
    return src, dst, _collapse_costs(q, homog, src, dst)


# ---------------------------------------------------------------- decimation

class _Collapser:
    def __init__(self, mesh: TriangleMesh, boundary_weight):
        self.pos = mesh.vertices
        self.homog = np.concatenate([self.pos, np.ones((len(self.pos), 1))], axis=1)
        self.faces = [list(map(int, f)) for f in mesh.faces]
        self.face_alive = [True] * len(self.faces)
        self.vfaces = [set() for _ in range(len(self.pos))]
        for i, f in enumerate(self.faces):
            for a in f:
                self.vfaces[a].add(i)
        self.alive = np.ones(len(self.pos), dtype=bool)
        self.version = [0] * len(self.pos)
        self.q, boundary = _plane_quadrics(mesh, boundary_weight)
        self.boundary_vertex = np.zeros(len(self.pos), dtype=bool)
        for a, b in boundary:
            self.boundary_vertex[a] = self.boundary_vertex[b] = True
        self.n_alive = len(self.pos)
        self.heap = []

    def neighbors(self, u):
        out = set()
        for fi in self.vfaces[u]:
            out.update(self.faces[fi])
        out.discard(u)
        return out

    def push_edges(self, vertices):
        src, dst = [], []
        seen = set()
        for w in vertices:
            for x in self.neighbors(w):
                key = (min(w, x), max(w, x))
                if key in seen:
                    continue
                seen.add(key)
                src += [w, x]
                dst += [x, w]
        if not src:
            return
        costs = _collapse_costs(self.q, self.homog, np.array(src), np.array(dst))
        ver = self.version
        for c, a, b in zip(costs.tolist(), src, dst):
            heapq.heappush(self.heap, (c, a, b, ver[a], ver[b]))

    def _normal(self, f):
        p = self.pos
        ax, ay, az = p[f[0]]
        bx, by, bz = p[f[1]]
        cx, cy, cz = p[f[2]]
        ux, uy, uz = bx - ax, by - ay, bz - az
        vx, vy, vz = cx - ax, cy - ay, cz - az
        return (uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx)

    def valid(self, u, v):
        fu, fv = self.vfaces[u], self.vfaces[v]
        shared = fu & fv
        if not shared or len(shared) > 2:
            return False
        opposite = set()
        for fi in shared:
            opposite.update(self.faces[fi])
        opposite -= {u, v}
        if self.neighbors(u) & self.neighbors(v) != opposite:
            return False
        if len(shared) == 2 and self.boundary_vertex[u] and self.boundary_vertex[v]:
            return False
        existing = {frozenset(self.faces[fi]) for fi in fv - shared}
        for fi in fu - shared:
            old = self.faces[fi]
            new = [v if a == u else a for a in old]
            if frozenset(new) in existing:
                return False
            n_old, n_new = self._normal(old), self._normal(new)
            area = 0.5 * math.sqrt(n_new[0] ** 2 + n_new[1] ** 2 + n_new[2] ** 2)
            if area < DEGENERATE_AREA or sum(x * y for x, y in zip(n_old, n_new)) < 0:
                return False
        return len(fu | fv) - len(shared) > 0

    def collapse(self, u, v):
        fu, fv = self.vfaces[u], self.vfaces[v]
        shared = fu & fv
        for fi in shared:
            self.face_alive[fi] = False
            for a in self.faces[fi]:
                self.vfaces[a].discard(fi)
        for fi in list(self.vfaces[u]):
            self.faces[fi] = [v if a == u else a for a in self.faces[fi]]
            self.vfaces[v].add(fi)
        self.vfaces[u] = set()
        self.alive[u] = False
        self.n_alive -= 1
        self.q[v] = self.q[v] + self.q[u]
        if self.boundary_vertex[u]:
            self.boundary_vertex[v] = True
        ring = self.neighbors(v)
        for w in ring | {v}:
            self.version[w] += 1
        self.push_edges(ring | {v})

    def run(self, target_n):
        self.push_edges(range(len(self.pos)))
        while self.n_alive > target_n:
            if not self.heap:
                raise DecimationError(
                    f"decimation stalled at {self.n_alive} vertices (target {target_n})", self.n_alive)
            _, u, v, vu, vv = heapq.heappop(self.heap)
            if not (self.alive[u] and self.alive[v]):
                continue
            if self.version[u] != vu or self.version[v] != vv:
                continue
            if self.valid(u, v):
                self.collapse(u, v)


def qem_decimate(mesh: TriangleMesh, target_n: int, boundary_weight=10.0):
    """Collapse edges until ``target_n`` vertices remain.

    Returns ``(coarse, down, kept)`` where ``kept`` are the fine indices of
    the surviving vertices (ascending) and ``down`` selects them.
    """
    if not 3 <= target_n < mesh.n_vertices:
        raise MeshError(f"target_n must satisfy 3 <= target_n < {mesh.n_vertices}, got {target_n}")
    if not is_connected(mesh):
        raise MeshError("decimation requires a connected mesh")
    c = _Collapser(mesh, boundary_weight)
    c.run(target_n)
    kept = np.flatnonzero(c.alive)
    remap = -np.ones(mesh.n_vertices, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    faces = np.array([c.faces[i] for i in range(len(c.faces)) if c.face_alive[i]], dtype=np.int64)
    coarse = TriangleMesh(mesh.vertices[kept], remap[faces])
    if not is_connected(coarse):
        raise DecimationError("decimation disconnected the mesh", len(kept))
    down = SparseMatrix(len(kept), mesh.n_vertices, np.arange(len(kept) + 1), kept, np.ones(len(kept)))
    return coarse, down, kept


# ---------------------------------------------------------------- upsampling

def closest_point_barycentric(points, a, b, c):
    """Barycentric coordinates of the closest point on triangles (a, b, c).

    All inputs broadcast against each other with a trailing axis of 3; the
    result is ``(weights[..., 3], squared_distance[...])``.  Follows the
    Voronoi region case analysis of Ericson's closest-point-on-triangle
    routine, so clamped points get exact 0/1 weights.
    """
    p = np.asarray(points, dtype=np.float64)
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    dot = lambda x, y: np.sum(x * y, axis=-1)  # noqa: E731
    d1, d2 = dot(ab, ap), dot(ac, ap)
    d3, d4 = dot(ab, bp), dot(ac, bp)
    d5, d6 = dot(ab, cp), dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    def ratio(num, den):
        return num / np.where(den == 0, 1.0, den)

    one, zero = np.ones_like(d1), np.zeros_like(d1)
    t_ab = ratio(d1, d1 - d3)
    t_ac = ratio(d2, d2 - d6)
    t_bc = ratio(d4 - d3, (d4 - d3) + (d5 - d6))
    inv = ratio(one, va + vb + vc)
    iv, iw = vb * inv, vc * inv
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    wa = np.select(conds, [one, zero, 1 - t_ab, zero, 1 - t_ac, zero], 1 - iv - iw)
    wb = np.select(conds, [zero, one, t_ab, zero, zero, 1 - t_bc], iv)
    wc = np.select(conds, [zero, zero, zero, one, t_ac, t_bc], iw)
    q = wa[..., None] * a + wb[..., None] * b + wc[..., None] * c
    return np.stack([wa, wb, wc], axis=-1), np.sum((p - q) ** 2, axis=-1)


def nearest_triangles(points, a, b, c, k=8):
    """Index of the nearest triangle for every point, with its barycentric weights.

    Exact: candidates are pruned with bounding spheres against an upper
    bound taken from the ``k`` triangles with the closest centroids.
    Equal distances resolve to the smaller triangle index.
    """
    from scipy.spatial import cKDTree

    points = np.asarray(points, dtype=np.float64)
    centers = (a + b + c) / 3.0
    radius = np.sqrt(np.max([np.sum((v - centers) ** 2, axis=1) for v in (a, b, c)], axis=0))
    tree = cKDTree(centers)
    k = min(k, len(centers))
    _, near = tree.query(points, k=k)
    near = np.asarray(near).reshape(len(points), k)
    with np.errstate(divide="ignore", invalid="ignore"):
        _, d_near = closest_point_barycentric(points[:, None], a[near], b[near], c[near])
    upper = np.sqrt(d_near.min(axis=1))
    cand = tree.query_ball_point(points, upper + radius.max() + 1e-12)
    pi = np.repeat(np.arange(len(points)), [len(x) for x in cand])
    ti = np.concatenate([np.asarray(x, dtype=np.int64) for x in cand])
    lower = np.linalg.norm(points[pi] - centers[ti], axis=1) - radius[ti]
    keep = lower <= upper[pi] + 1e-12
    pi, ti = pi[keep], ti[keep]
    with np.errstate(divide="ignore", invalid="ignore"):
        w, dist = closest_point_barycentric(points[pi], a[ti], b[ti], c[ti])
    order = np.lexsort((ti, dist, pi))
    first = order[np.r_[True, pi[order][1:] != pi[order][:-1]]]
    return ti[first], w[first]


def barycentric_upsample(fine, coarse: TriangleMesh) -> SparseMatrix:
    """Upsampling matrix (fine x coarse) from nearest-triangle barycentric weights."""
    points = fine.vertices if isinstance(fine, TriangleMesh) else np.asarray(fine, dtype=np.float64)
    _, _, _, degenerate = face_geometry(coarse)
    tri = np.flatnonzero(~degenerate)
    if tri.size == 0:
        raise MeshError("coarse mesh has no non-degenerate faces")
    f = coarse.faces[tri]
    a, b, c = (coarse.vertices[f[:, k]] for k in range(3))
    best, w = nearest_triangles(points, a, b, c)
    w = np.clip(w, 0.0, 1.0)
    w /= w.sum(axis=1, keepdims=True)
    rows = np.repeat(np.arange(len(points)), 3)
    cols = f[best].ravel()
    vals = w.ravel()
    nz = vals > 0
    return SparseMatrix.from_coo(rows[nz], cols[nz], vals[nz], (len(points), coarse.n_vertices))


# ---------------------------------------------------------------- hierarchy

def level_sizes(n, levels, factor=4):
    sizes = [n]
    for _ in range(levels):
        sizes.append(math.ceil(sizes[-1] / factor))
    return sizes


def laplacian_spectrum(mesh: TriangleMesh, iters=100, seed=0):
    """Normalized Laplacian, its lambda_max estimate and the scaled Laplacian."""
    from .spectral import scale_laplacian

    lap = normalized_laplacian(mesh)
    lam = power_iteration(lap, iters=iters, seed=seed, fallback=2.0)
    if lam <= 0:
        lam = 2.0
    return lap, lam, scale_laplacian(lap, lam)


def build_hierarchy(mesh: TriangleMesh, levels=3, boundary_weight=10.0, power_iters=100) -> Hierarchy:
    if levels < 0:
        raise ValueError("levels must be >= 0")
    sizes = level_sizes(mesh.n_vertices, levels)
    if sizes[-1] < 3:
        raise MeshError(f"mesh with {mesh.n_vertices} vertices is too small for {levels} levels: {sizes}")
    meshes, steps = [mesh], []
    for target in sizes[1:]:
        fine = meshes[-1]
        coarse, down, kept = qem_decimate(fine, target, boundary_weight)
        up = barycentric_upsample(fine, coarse)
        steps.append(ResampleLevel(coarse, down, up, kept))
        meshes.append(coarse)
    laps, lams, scaled = [], [], []
    for m in meshes:
        lap, lam, sc = laplacian_spectrum(m, iters=power_iters)
        laps.append(lap)
        lams.append(lam)
        scaled.append(sc)
    return Hierarchy(meshes, steps, laps, lams, scaled)


# ---------------------------------------------------------------- persistence

def save_hierarchy(h: Hierarchy, directory) -> dict:
    """Write level meshes as OBJ and transforms as OTTK triplets plus ``hierarchy.json``."""
    from pathlib import Path

    from .mesh import save_obj
    from .ottk import save_sparse, write_json

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    record = {"sizes": h.sizes, "lambda_max": [float(x) for x in h.lambda_max], "levels": []}
    for k, m in enumerate(h.meshes):
        save_obj(m, directory / f"level_{k}.obj")
    for k, lv in enumerate(h.levels):
        record["levels"].append({
            "fine": f"level_{k}.obj",
            "coarse": f"level_{k + 1}.obj",
            "down": save_sparse(lv.down, directory, f"down_{k}"),
            "up": save_sparse(lv.up, directory, f"up_{k}"),
        })
    write_json(record, directory / "hierarchy.json")
    return record


def load_hierarchy(directory) -> Hierarchy:
    from pathlib import Path

    from .mesh import load_obj
    from .ottk import load_sparse, read_json
    from .spectral import scale_laplacian

    directory = Path(directory)
    record = read_json(directory / "hierarchy.json")
    meshes = [load_obj(directory / f"level_{k}.obj") for k in range(len(record["sizes"]))]
    levels = []
    for k, lv in enumerate(record["levels"]):
        down = load_sparse(directory, lv["down"])
        up = load_sparse(directory, lv["up"])
        levels.append(ResampleLevel(meshes[k + 1], down, up, down.indices.copy()))
    laps = [normalized_laplacian(m) for m in meshes]
    lams = [float(x) for x in record["lambda_max"]]
    scaled = [scale_laplacian(lap, lam) for lap, lam in zip(laps, lams)]
    return Hierarchy(meshes, levels, laps, lams, scaled)
