"""A complete simulation setup: object, materials, colliders, forces and horizon."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .constraints import ConstraintSet, MaterialParams
from .core_model import MassModel, Mesh, SimConfig, SimState

CONTROL_FAMILIES = ("cloth", "solid", "initial_velocity", "initial_position", "force_sequence", "collider")


@dataclass
class Scene:
    mesh: Mesh
    mass: MassModel
    constraints: ConstraintSet
    materials: MaterialParams
    config: SimConfig = field(default_factory=SimConfig)
    x0: np.ndarray | None = None
    v0: np.ndarray | None = None
    colliders: list = field(default_factory=list)
    # extra per-step forces on top of gravity, shape (horizon, 3V)
    forces: np.ndarray | None = None
    # optional scripted positions of pinned vertices, shape (horizon + 1, 3V)
    pin_targets: np.ndarray | None = None
    horizon: int = 1

    def __post_init__(self):
        n3 = 3 * self.mesh.vertex_count
        self.x0 = self.mesh.rest_positions.ravel().copy() if self.x0 is None else np.asarray(self.x0, float).ravel()
        self.v0 = np.zeros(n3) if self.v0 is None else np.asarray(self.v0, dtype=float).ravel()
        if self.x0.shape != (n3,) or self.v0.shape != (n3,):
            raise ValueError("initial state does not match the vertex count")
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=float).reshape(-1, n3)

    @property
    def n3(self) -> int:
        return 3 * self.mesh.vertex_count

    def with_(self, **kw) -> "Scene":
        return replace(self, **kw)

    def initial_state(self) -> SimState:
        return SimState(self.x0.copy(), self.v0.copy(), 0)

    def gravity_force(self) -> np.ndarray:
        return (self.mass.mass[:, None] * np.asarray(self.config.gravity)[None, :]).ravel()

    def external_force(self, n: int) -> np.ndarray:
        f = self.gravity_force()
        if self.forces is not None and n < len(self.forces):
            f = f + self.forces[n]
        return f

    def pin_target(self, n: int):
        if self.pin_targets is None:
            return None
        return self.pin_targets[min(n, len(self.pin_targets) - 1)]

    def control_size(self, family: str | None) -> int:
        if family is None:
            return 0
        if family == "cloth":
            return self.materials.cloth.size
        if family == "solid":
            return self.materials.solid.size
        if family in ("initial_velocity", "initial_position"):
            return self.n3
        if family == "force_sequence":
            return self.n3 * self.horizon
        if family == "collider":
            return int(sum(c.nparam for c in self.colliders))
        raise ValueError(f"unknown control family {family!r}")
