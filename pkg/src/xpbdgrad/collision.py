"""Proximity detection, collision constraints and collider-parameter Jacobians.

Analytic colliders (sphere, capsule, half-space) are represented by their
exact signed distance, so within a step a collision row is a smooth
function of the vertex position and of the collider parameters.  Mesh
witnesses (static triangle meshes and self-collision) freeze the witness
barycentrics and the normal for the step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import kernels as K
from .constraints import Constraint

logger = logging.getLogger(__name__)


def _unit(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("zero-length normal")
    return v / n


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    nparam = 4
    kind = K.COL_SPHERE

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    @property
    def params(self):
        return np.array([*self.center, self.radius])

    def with_params(self, p):
        return Sphere(np.asarray(p[:3], dtype=float), float(p[3]), self.lower, self.upper)

    def gaps(self, x):
        """Signed gap, witness and outward normal for every point in ``x``."""
        d = x - self.center
        ln = np.linalg.norm(d, axis=1)
        n = d / np.where(ln > 0, ln, 1.0)[:, None]
        n[ln == 0] = (0.0, 1.0, 0.0)
        return ln - self.radius, self.center + self.radius * n, n

    def kernel_params(self, h):
        return np.array([*self.center, self.radius, h])

    def witness_jacobian(self, normal, witness):
        # witness = c + r n with the normal frozen
        return np.hstack([np.eye(3), normal[:, None]])


@dataclass
class Capsule:
    p: np.ndarray
    q: np.ndarray
    radius: float
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    nparam = 7
    kind = K.COL_CAPSULE

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        if not self.radius > 0:
            raise ValueError("capsule radius must be positive")

    @property
    def params(self):
        return np.array([*self.p, *self.q, self.radius])

    def with_params(self, prm):
        return Capsule(prm[0:3], prm[3:6], float(prm[6]), self.lower, self.upper)

    def segment_parameter(self, x):
        u = self.q - self.p
        return np.clip(((x - self.p) @ u) / (u @ u), 0.0, 1.0)

    def gaps(self, x):
        t = self.segment_parameter(x)
        s = self.p + t[:, None] * (self.q - self.p)
        d = x - s
        ln = np.linalg.norm(d, axis=1)
        n = d / np.where(ln > 0, ln, 1.0)[:, None]
        return ln - self.radius, s + self.radius * n, n

    def kernel_params(self, h):
        return np.array([*self.p, *self.q, self.radius, h])

    def witness_jacobian(self, normal, witness):
        # barycentric split of the segment point between the endpoints
        t = float(self.segment_parameter(witness[None])[0])
        return np.hstack([(1.0 - t) * np.eye(3), t * np.eye(3), normal[:, None]])


@dataclass
class HalfSpace:
    normal: np.ndarray
    offset: float = 0.0
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    nparam = 1
    kind = K.COL_PLANE

    def __post_init__(self):
        self.normal = _unit(self.normal)

    @property
    def params(self):
        return np.array([self.offset])

    def with_params(self, prm):
        return HalfSpace(self.normal, float(prm[0]), self.lower, self.upper)

    def gaps(self, x):
        g = x @ self.normal - self.offset
        return g, x - g[:, None] * self.normal, np.tile(self.normal, (len(x), 1))

    def kernel_params(self, h):
        return np.array([*self.normal, self.offset, h])

    def witness_jacobian(self, normal, witness):
        return normal[:, None].copy()


@dataclass
class TriangleMeshCollider:
    vertices: np.ndarray
    triangles: np.ndarray
    nparam = 0
    kind = K.COL_STATIC_TRI
    params = np.zeros(0)
    lower = None
    upper = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    def with_params(self, prm):
        return self

    def witness_jacobian(self, normal, witness):
        return np.zeros((3, 0))


@dataclass
class Proximity:
    vertex: int
    witness: np.ndarray
    normal: np.ndarray
    gap: float
    collider: int = -1          # index into the collider list, -1 for self-collision
    triangle: int = -1          # witness triangle for mesh witnesses
    bary: np.ndarray = field(default_factory=lambda: np.zeros(3))
    triangle_vertices: tuple = ()

    @property
    def sort_key(self):
        return (self.vertex, self.collider if self.collider >= 0 else 1 << 30, self.triangle)


@njit(cache=True)
def closest_point_triangle(p, a, b, c):
    """Closest point on triangle abc to p and its barycentric weights."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    if d1 <= 0.0 and d2 <= 0.0:
        return a.copy(), np.array([1.0, 0.0, 0.0])
    bp = p - b
    d3 = ab @ bp
    d4 = ac @ bp
    if d3 >= 0.0 and d4 <= d3:
        return b.copy(), np.array([0.0, 1.0, 0.0])
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a + v * ab, np.array([1.0 - v, v, 0.0])
    cp = p - c
    d5 = ab @ cp
    d6 = ac @ cp
    if d6 >= 0.0 and d5 <= d6:
        return c.copy(), np.array([0.0, 0.0, 1.0])
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a + w * ac, np.array([1.0 - w, 0.0, w])
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + w * (c - b), np.array([0.0, 1.0 - w, w])
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return a + ab * v + ac * w, np.array([1.0 - v - w, v, w])


class SpatialHash:
    """Uniform grid over triangle bounding boxes for vertex-triangle queries."""

    def __init__(self, tri_pts: np.ndarray, cell: float, pad: float):
        self.cell = cell
        self.table: dict[tuple, list[int]] = {}
        lo = np.floor((tri_pts.min(axis=1) - pad) / cell).astype(np.int64)
        hi = np.floor((tri_pts.max(axis=1) + pad) / cell).astype(np.int64)
        for t in range(len(tri_pts)):
            for i in range(lo[t, 0], hi[t, 0] + 1):
                for j in range(lo[t, 1], hi[t, 1] + 1):
                    for k in range(lo[t, 2], hi[t, 2] + 1):
                        self.table.setdefault((i, j, k), []).append(t)

    def query(self, p: np.ndarray) -> list[int]:
        key = tuple(np.floor(p / self.cell).astype(np.int64))
        return self.table.get(key, [])


def _mesh_proximities(x, tri_pts, tri_ids, margin, skip, collider):
    out = []
    if len(tri_pts) == 0:
        return out
    edge = np.linalg.norm(tri_pts[:, 1] - tri_pts[:, 0], axis=1).mean()
    grid = SpatialHash(tri_pts, max(edge, margin, 1e-6), margin)
    for v in range(len(x)):
        for t in sorted(grid.query(x[v])):
            if skip is not None and skip(v, t):
                continue
            a, b, c = tri_pts[t]
            w, bary = closest_point_triangle(x[v], a, b, c)
            d = x[v] - w
            dist = float(np.linalg.norm(d))
            if dist >= margin:
                continue
            nt = np.cross(b - a, c - a)
            nt /= np.linalg.norm(nt)
            if bary.min() > 1e-9 or dist < 1e-12:
                n = nt if d @ nt >= 0 else -nt
            else:
                n = d / dist
            out.append(Proximity(v, w, n, dist, collider, int(t), bary, tuple(int(i) for i in tri_ids[t])))
    return out


def detect_proximities(x, colliders, mesh=None, h: float = 0.0, margin: float | None = None,
                       self_collision: bool = False) -> list[Proximity]:
    """Every vertex closer than ``margin`` to a collider or a non-adjacent triangle.

    Ordered by vertex id, then collider index, then triangle id.
    """
    margin = 2.0 * h if margin is None else margin
    if h < 0 or margin < h:
        raise ValueError("need 0 <= thickness <= margin")
    p = np.asarray(x, dtype=float).reshape(-1, 3)
    found: list[Proximity] = []
    for ci, col in enumerate(colliders):
        if isinstance(col, TriangleMeshCollider):
            found += _mesh_proximities(p, col.vertices[col.triangles], col.triangles, margin, None, ci)
            continue
        gap, wit, nrm = col.gaps(p)
        for v in np.nonzero(gap < margin)[0]:
            found.append(Proximity(int(v), wit[v], nrm[v], float(gap[v]), ci))
    if self_collision and mesh is not None and len(mesh.triangles):
        tris = mesh.triangles
        near = [set() for _ in range(len(p))]
        for a, b in mesh.edges:
            near[a].add(int(b))
            near[b].add(int(a))
        for v in range(len(p)):
            near[v].add(v)
        tri_sets = [set(t) for t in tris.tolist()]
        skip = lambda v, t: bool(near[v] & tri_sets[t])  # noqa: E731
        found += _mesh_proximities(p, p[tris], tris, margin, skip, -1)
    found.sort(key=lambda q: q.sort_key)
    return found


def make_collision_constraints(proximities, h: float, collision_compliance: float, colliders=()) -> list[Constraint]:
    """One unilateral compliant row per proximity, C = gap - h.

    ``material`` on the returned rows carries the collider index (-1 for
    self-collision) so collider-parameter gradients can be routed.
    """
    rows = []
    for q in proximities:
        if q.collider >= 0 and not isinstance(colliders[q.collider], TriangleMeshCollider):
            col = colliders[q.collider]
            rows.append(Constraint(col.kind, (q.vertex,), col.kernel_params(h), q.collider, 0.0, collision_compliance))
        elif q.collider >= 0:
            prm = np.array([*q.normal, *q.witness, h])
            rows.append(Constraint(K.COL_STATIC_TRI, (q.vertex,), prm, q.collider, 0.0, collision_compliance))
        else:
            prm = np.array([*q.normal, *q.bary, h])
            rows.append(Constraint(K.COL_VERTEX_TRI, (q.vertex, *q.triangle_vertices), prm, -1, 0.0,
                                   collision_compliance))
    return rows


def collider_parameter_jacobian(collider, proximity: Proximity) -> np.ndarray:
    """d(witness point)/d(collider parameters), shape (3, nparam)."""
    return collider.witness_jacobian(np.asarray(proximity.normal, dtype=float),
                                     np.asarray(proximity.witness, dtype=float))


def collider_offsets(colliders) -> np.ndarray:
    """Start column of each collider's parameters in the stacked parameter vector."""
    sizes = [c.nparam for c in colliders]
    return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
