"""Simulation state, lumped masses, mesh topology and the explicit half of the step."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

logger = logging.getLogger(__name__)


class MeshError(ValueError):
    """Invalid mesh topology or geometry."""


@dataclass
class Mesh:
    rest_positions: np.ndarray
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    tetrahedra: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.int64))
    # optional per-vertex material-frame coordinates (warp, weft) for membranes
    uv: np.ndarray | None = None

    def __post_init__(self):
        self.rest_positions = np.ascontiguousarray(self.rest_positions, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.tetrahedra = np.asarray(self.tetrahedra, dtype=np.int64).reshape(-1, 4)
        if self.uv is not None:
            self.uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 2)

    @property
    def vertex_count(self) -> int:
        return len(self.rest_positions)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges of triangles and tetrahedra, sorted."""
        pairs = []
        for a, b in ((0, 1), (1, 2), (2, 0)):
            pairs.append(self.triangles[:, [a, b]])
        for a, b in ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)):
            pairs.append(self.tetrahedra[:, [a, b]])
        e = np.sort(np.concatenate(pairs), axis=1)
        return np.unique(e, axis=0) if len(e) else np.zeros((0, 2), dtype=np.int64)

    @cached_property
    def bend_stencils(self) -> np.ndarray:
        """Hinges (a, b, c, d): edge ab shared by triangles abc and abd.

        Each interior edge appears exactly once; edges shared by more than
        two triangles are skipped.
        """
        owners: dict[tuple[int, int], list[int]] = {}
        for t, tri in enumerate(self.triangles):
            for k in range(3):
                a, b = int(tri[k]), int(tri[(k + 1) % 3])
                owners.setdefault((min(a, b), max(a, b)), []).append(t)
        out = []
        for (a, b), ts in sorted(owners.items()):
            if len(ts) != 2:
                continue
            c = [v for v in self.triangles[ts[0]] if v != a and v != b][0]
            d = [v for v in self.triangles[ts[1]] if v != a and v != b][0]
            out.append((a, b, c, d))
        return np.array(out, dtype=np.int64).reshape(-1, 4)

    def triangle_areas(self, x: np.ndarray | None = None) -> np.ndarray:
        p = self.rest_positions if x is None else x.reshape(-1, 3)
        t = self.triangles
        cr = np.cross(p[t[:, 1]] - p[t[:, 0]], p[t[:, 2]] - p[t[:, 0]])
        return 0.5 * np.linalg.norm(cr, axis=1)

    def tet_volumes(self, x: np.ndarray | None = None) -> np.ndarray:
        p = self.rest_positions if x is None else x.reshape(-1, 3)
        t = self.tetrahedra
        d = np.stack([p[t[:, k]] - p[t[:, 0]] for k in (1, 2, 3)], axis=2)
        return np.abs(np.linalg.det(d)) / 6.0 if len(t) else np.zeros(0)

    def validate(self) -> None:
        V = self.vertex_count
        for name, elems in (("triangle", self.triangles), ("tetrahedron", self.tetrahedra)):
            if len(elems) == 0:
                continue
            if elems.min() < 0 or elems.max() >= V:
                bad = int(np.nonzero((elems < 0).any(1) | (elems >= V).any(1))[0][0])
                raise MeshError(f"{name} {bad} references a vertex outside [0, {V})")
            s = np.sort(elems, axis=1)
            rep = np.nonzero((s[:, 1:] == s[:, :-1]).any(1))[0]
            if len(rep):
                raise MeshError(f"{name} {int(rep[0])} has repeated vertices")
        if not np.all(np.isfinite(self.rest_positions)):
            raise MeshError("non-finite rest position")


@dataclass
class SimState:
    x: np.ndarray
    v: np.ndarray
    time_index: int = 0

    def copy(self) -> "SimState":
        return SimState(self.x.copy(), self.v.copy(), self.time_index)


@dataclass
class MassModel:
    mass: np.ndarray
    inv_mass: np.ndarray
    pinned: np.ndarray

    @property
    def vertex_count(self) -> int:
        return len(self.mass)

    def per_dof(self, a: np.ndarray) -> np.ndarray:
        return np.repeat(a, 3)


@dataclass
class RestQuantities:
    triangle_areas: np.ndarray
    tet_volumes: np.ndarray


@dataclass
class SimConfig:
    dt: float = 0.0016
    constraint_iterations: int = 20
    gravity: tuple = (0.0, -9.81, 0.0)
    collision_thickness: float = 0.0
    collision_compliance: float = 1e-8
    # activation margin; None means twice the thickness
    collision_margin: float | None = None
    self_collision: bool = False
    # "converged" (fixed-point closed form), "iterative" (per-iteration accumulation)
    # or "unrolled" (exact reverse sweep through every projection, no linear solve)
    derivative_mode: str = "converged"
    pd_projection: bool = True
    keep_raw_blocks: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.constraint_iterations < 1:
            raise ValueError("constraint_iterations must be >= 1")
        if self.collision_thickness < 0:
            raise ValueError("collision_thickness must be >= 0")
        if self.derivative_mode not in ("converged", "iterative", "unrolled"):
            raise ValueError(f"unknown derivative_mode {self.derivative_mode!r}")
        self.gravity = tuple(float(g) for g in self.gravity)

    @property
    def margin(self) -> float:
        if self.collision_margin is not None:
            return self.collision_margin
        return 2.0 * self.collision_thickness


def build_sim_object(mesh: Mesh, density: float, pins=()) -> tuple[MassModel, RestQuantities]:
    """Lumped masses from rest areas (cloth) and rest volumes (solids).

    Triangles give a third of their area to each corner and tetrahedra a
    quarter of their volume; a mesh with both uses both.
    """
    if not density > 0:
        raise ValueError("density must be positive")
    mesh.validate()
    V = mesh.vertex_count
    areas = mesh.triangle_areas()
    vols = mesh.tet_volumes()
    bad = np.nonzero(areas <= 1e-14)[0]
    if len(bad):
        raise MeshError(f"triangle {int(bad[0])} has zero rest area")
    bad = np.nonzero(vols <= 1e-18)[0]
    if len(bad):
        raise MeshError(f"tetrahedron {int(bad[0])} has zero rest volume")
    mass = np.zeros(V)
    if len(mesh.tetrahedra):
        np.add.at(mass, mesh.tetrahedra.ravel(), np.repeat(density * vols / 4.0, 4))
    else:
        np.add.at(mass, mesh.triangles.ravel(), np.repeat(density * areas / 3.0, 3))
    pinned = np.zeros(V, dtype=bool)
    pinned[list(pins)] = True
    orphan = np.nonzero((mass <= 0) & ~pinned)[0]
    if len(orphan):
        raise MeshError(f"vertex {int(orphan[0])} belongs to no element")
    inv_mass = np.where(pinned, 0.0, 1.0 / np.where(mass > 0, mass, 1.0))
    return MassModel(mass, inv_mass, pinned), RestQuantities(areas, vols)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite input")


def predict_positions(state: SimState, f_ext: np.ndarray, mass: MassModel, config: SimConfig,
                      pin_targets: np.ndarray | None = None) -> np.ndarray:
    """x + dt v + dt^2 M^-1 f, with pinned vertices held (or moved to ``pin_targets``)."""
    _check_finite(state.x, state.v, f_ext)
    dt = config.dt
    w = np.repeat(mass.inv_mass, 3)
    xt = state.x + dt * state.v + dt * dt * w * f_ext
    pin = np.repeat(mass.pinned, 3)
    xt[pin] = state.x[pin] if pin_targets is None else pin_targets[pin]
    return xt


def finalize_velocities(x_new: np.ndarray, x_old: np.ndarray, dt: float) -> np.ndarray:
    if not dt > 0:
        raise ValueError("dt must be positive")
    v = (x_new - x_old) / dt
    _check_finite(v)
    return v


def grid_swatch(nx: int, ny: int, width: float = 1.0, height: float = 1.0,
                origin=(0.0, 0.0, 0.0), plane: str = "xz") -> Mesh:
    """Regular (nx x ny)-vertex cloth grid with alternating diagonals.

    ``plane="xz"`` lays the cloth horizontally (y up); ``"xy"`` hangs it
    vertically.  UV coordinates follow the grid axes (warp = first axis).
    """
    us = np.linspace(0.0, width, nx)
    vs = np.linspace(0.0, height, ny)
    U, Vv = np.meshgrid(us, vs, indexing="xy")
    uv = np.stack([U.ravel(), Vv.ravel()], axis=1)
    o = np.asarray(origin, dtype=float)
    if plane == "xz":
        pos = o + np.stack([uv[:, 0], np.zeros(len(uv)), uv[:, 1]], axis=1)
    elif plane == "xy":
        pos = o + np.stack([uv[:, 0], uv[:, 1], np.zeros(len(uv))], axis=1)
    else:
        raise ValueError(f"unknown plane {plane!r}")
    tris = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b, c, d = a + 1, a + nx, a + nx + 1
            if (i + j) % 2 == 0:
                tris += [(a, b, d), (a, d, c)]
            else:
                tris += [(a, b, c), (b, d, c)]
    return Mesh(pos, np.array(tris), uv=uv)


def tet_bar(nx: int = 1, ny: int = 1, nz: int = 1, size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> Mesh:
    """Box of nx*ny*nz cubes, each split into six tetrahedra."""
    sx, sy, sz = (np.asarray(size, dtype=float) / np.array([nx, ny, nz]))
    o = np.asarray(origin, dtype=float)
    idx = lambda i, j, k: (k * (ny + 1) + j) * (nx + 1) + i  # noqa: E731
    pts = [o + np.array([i * sx, j * sy, k * sz])
           for k in range(nz + 1) for j in range(ny + 1) for i in range(nx + 1)]
    tets = []
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                c = [idx(i + (b & 1), j + ((b >> 1) & 1), k + ((b >> 2) & 1)) for b in range(8)]
                # Kuhn split along the 0-7 diagonal
                for p in ((1, 3), (3, 2), (2, 6), (6, 4), (4, 5), (5, 1)):
                    tets.append((c[0], c[p[0]], c[p[1]], c[7]))
    return Mesh(np.array(pts), tetrahedra=np.array(tets))
