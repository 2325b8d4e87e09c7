"""Ready-made scenes used by the tests, the acceptance suite and the CLI."""

from __future__ import annotations

import numpy as np

from .collision import Sphere
from .constraints import (ConstraintSet, MaterialParams, build_cloth_constraints, build_distance_constraints,
                          build_solid_constraints)
from .core_model import MassModel, Mesh, SimConfig, build_sim_object, grid_swatch, tet_bar
from .scene import Scene

DEFAULT_CLOTH = (5.0, 4.0, 1.0, 1.75, 2e-4)


def swatch_scene(n: int = 5, size: float = 0.4, horizon: int = 5, density: float = 0.2, cloth=DEFAULT_CLOTH,
                 pins="edge", config: SimConfig | None = None, colliders=(), origin=(0.0, 0.0, 0.0),
                 plane: str = "xz") -> Scene:
    """Square n x n cloth swatch.

    ``pins``: "edge" pins the two corners of the first row, "corners" all
    four, "none" nothing, or an explicit vertex list.
    """
    mesh = grid_swatch(n, n, size, size, origin=origin, plane=plane)
    if isinstance(pins, str):
        pins = {"edge": [0, n - 1], "corners": [0, n - 1, n * (n - 1), n * n - 1], "none": []}[pins]
    mass, _ = build_sim_object(mesh, density, pins)
    cs = build_cloth_constraints(mesh)
    return Scene(mesh, mass, cs, MaterialParams(cloth=[cloth]), config or SimConfig(), colliders=list(colliders),
                 horizon=horizon)


def draped_swatch_scene(n: int = 9, size: float = 0.6, radius: float = 0.15, horizon: int = 60,
                        cloth=DEFAULT_CLOTH, config: SimConfig | None = None) -> Scene:
    """Free swatch falling onto a static sphere centred under it."""
    cfg = config or SimConfig(collision_thickness=0.005)
    sphere = Sphere(np.array([size / 2, -radius - 0.01, size / 2]), radius)
    return swatch_scene(n, size, horizon, cloth=cloth, pins="none", config=cfg, colliders=[sphere])


def two_tet_bar(length: float = 0.2, width: float = 0.05) -> Mesh:
    """Two tetrahedra sharing a face, extending along +x from a clamped triangle at x = 0."""
    w = width
    pts = np.array([[0, 0, 0], [0, w, 0], [0, 0, w], [length / 2, w / 2, w / 2], [length, w / 3, w / 3]], float)
    return Mesh(pts, tetrahedra=np.array([[0, 1, 2, 3], [1, 2, 3, 4]]))


def tet_bar_scene(cells=None, size=(0.2, 0.1, 0.1), horizon: int = 5, density: float = 1000.0,
                  lame=(30.0, 50.0), pins="left", config: SimConfig | None = None) -> Scene:
    """Bar of tetrahedra; ``lame`` holds (a, b) with mu = a^2 and lambda = b^2.

    ``cells=None`` gives the two-tetrahedron bar, otherwise a box of
    (nx, ny, nz) cubes with six tetrahedra each.
    """
    mesh = two_tet_bar(size[0], size[1]) if cells is None else tet_bar(*cells, size=size)
    if pins == "left":
        pins = np.nonzero(mesh.rest_positions[:, 0] < 1e-12)[0]
    elif pins == "none":
        pins = []
    mass, _ = build_sim_object(mesh, density, pins)
    cs = build_solid_constraints(mesh)
    return Scene(mesh, mass, cs, MaterialParams(solid=[lame]), config or SimConfig(), horizon=horizon)


def chain_scene(masses=(1.0, 1.0), length: float = 1.0, compliance: float = 0.0, pinned_top: bool = True,
                horizon: int = 1, config: SimConfig | None = None) -> Scene:
    """Vertical chain of particles joined by distance constraints."""
    k = len(masses)
    pts = np.array([[0.0, -i * length, 0.0] for i in range(k)])
    edges = np.array([(i, i + 1) for i in range(k - 1)])
    mesh = Mesh(pts)
    m = np.asarray(masses, dtype=float)
    pinned = np.zeros(k, dtype=bool)
    pinned[0] = pinned_top
    mass = MassModel(m, np.where(pinned, 0.0, 1.0 / m), pinned)
    cs = build_distance_constraints(mesh, compliance, edges)
    return Scene(mesh, mass, cs, MaterialParams(), config or SimConfig(), horizon=horizon)


def particle_scene(horizon: int = 10, mass: float = 1.0, x0=(0.0, 0.0, 0.0), v0=(0.0, 0.0, 0.0),
                   config: SimConfig | None = None) -> Scene:
    """A single free particle under gravity (a projectile)."""
    mesh = Mesh(np.array([x0], dtype=float))
    mm = MassModel(np.array([mass]), np.array([1.0 / mass]), np.zeros(1, dtype=bool))
    return Scene(mesh, mm, ConstraintSet.empty(), MaterialParams(), config or SimConfig(), v0=np.array(v0, float),
                 horizon=horizon)
