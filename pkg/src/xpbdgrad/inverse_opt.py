"""Goals, control vectors, finite-difference checks and the descent loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .adjoint_engine import backward_pass
from .checkpoint import CheckpointStore
from .forward_solver import simulate
from .scene import CONTROL_FAMILIES, Scene

logger = logging.getLogger(__name__)

__all__ = ["KeyframeL2", "PointCloud", "ControlVector", "CheckpointStore", "eval_goal", "goal_state_derivatives",
           "goal_derivative_arrays", "compute_gradient", "finite_difference_oracle", "gradient_descent_step",
           "run_optimization", "OptimizationResult"]


@dataclass
class KeyframeL2:
    """Weighted squared distance to reference states at selected steps.

    phi = 1/2 sum_n sum_v w_v^2 (|x_v - x*_v|^2 + |v_v - v*_v|^2) + beta/2 |u|^2
    """
    steps: list
    positions: np.ndarray                 # (len(steps), 3V)
    velocities: np.ndarray | None = None  # (len(steps), 3V) or None
    weights: np.ndarray | None = None     # per-vertex scalar weights, (V,) or (len(steps), V)
    beta: float = 0.0

    def __post_init__(self):
        self.steps = [int(s) for s in self.steps]
        self.positions = np.asarray(self.positions, dtype=float).reshape(len(self.steps), -1)
        if self.velocities is not None:
            self.velocities = np.asarray(self.velocities, dtype=float).reshape(len(self.steps), -1)
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if np.any(self.weights < 0):
                raise ValueError("weights must be >= 0")

    def _w2(self, k: int) -> np.ndarray:
        if self.weights is None:
            return np.ones(self.positions.shape[1])
        w = self.weights if self.weights.ndim == 1 else self.weights[k]
        return np.repeat(w * w, 3)


@dataclass
class PointCloud:
    """Sum over vertices of the squared distance to the closest target point.

    The vertex-to-point pairing is recomputed for every evaluation and held
    fixed when differentiating.
    """
    points: np.ndarray
    steps: list
    weight: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.steps = [int(s) for s in self.steps]
        self._tree = cKDTree(self.points)

    def closest(self, x: np.ndarray) -> np.ndarray:
        _, i = self._tree.query(x.reshape(-1, 3))
        return self.points[i]


def _check_steps(goal, trajectory):
    for s in goal.steps:
        if s < 0 or s > trajectory.horizon:
            raise ValueError(f"goal references step {s} outside the simulated horizon 0..{trajectory.horizon}")


def eval_goal(goal, trajectory, controls=None) -> float:
    _check_steps(goal, trajectory)
    phi = 0.0
    if isinstance(goal, KeyframeL2):
        for k, s in enumerate(goal.steps):
            st = trajectory.states[s]
            w2 = goal._w2(k)
            phi += 0.5 * np.sum(w2 * (st.x - goal.positions[k]) ** 2)
            if goal.velocities is not None:
                phi += 0.5 * np.sum(w2 * (st.v - goal.velocities[k]) ** 2)
    elif isinstance(goal, PointCloud):
        for s in goal.steps:
            x = trajectory.states[s].x.reshape(-1, 3)
            phi += goal.weight * np.sum((x - goal.closest(x)) ** 2)
    else:
        raise TypeError(f"unsupported goal {type(goal).__name__}")
    if controls is not None and goal.beta:
        phi += 0.5 * goal.beta * float(controls.values @ controls.values)
    return float(phi)


def goal_state_derivatives(goal, trajectory, n: int, controls=None):
    """(dphi/dx_n, dphi/dv_n, explicit dphi/du) for one step."""
    st = trajectory.states[n]
    dx = np.zeros_like(st.x)
    dv = np.zeros_like(st.v)
    if isinstance(goal, KeyframeL2):
        for k, s in enumerate(goal.steps):
            if s != n:
                continue
            w2 = goal._w2(k)
            dx += w2 * (st.x - goal.positions[k])
            if goal.velocities is not None:
                dv += w2 * (st.v - goal.velocities[k])
    elif isinstance(goal, PointCloud):
        if n in goal.steps:
            x = st.x.reshape(-1, 3)
            dx += (2.0 * goal.weight * (x - goal.closest(x))).ravel() * goal.steps.count(n)
    du = goal.beta * controls.values if controls is not None and goal.beta else None
    return dx, dv, du


def goal_derivative_arrays(goal, trajectory, controls=None):
    _check_steps(goal, trajectory)
    N = trajectory.horizon
    n3 = len(trajectory.states[0].x)
    gdx = np.zeros((N + 1, n3))
    gdv = np.zeros((N + 1, n3))
    for n in sorted(set(goal.steps)):
        gdx[n], gdv[n], _ = goal_state_derivatives(goal, trajectory, n)
    du = np.zeros(controls.size) if controls is not None else None
    if controls is not None and goal.beta:
        du = goal.beta * controls.values
    return gdx, gdv, du


@dataclass
class ControlVector:
    """One family of optimization variables with box bounds and a fixed step size."""
    family: str
    values: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    step_size: float | np.ndarray = 1.0

    def __post_init__(self):
        if self.family not in CONTROL_FAMILIES:
            raise ValueError(f"unknown control family {self.family!r}")
        self.values = np.asarray(self.values, dtype=float).ravel().copy()
        n = len(self.values)
        self.lower = np.full(n, -np.inf) if self.lower is None else np.broadcast_to(
            np.asarray(self.lower, dtype=float), (n,)).copy()
        self.upper = np.full(n, np.inf) if self.upper is None else np.broadcast_to(
            np.asarray(self.upper, dtype=float), (n,)).copy()
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound above upper bound")
        self.values = np.clip(self.values, self.lower, self.upper)

    @property
    def size(self) -> int:
        return len(self.values)

    def copy(self) -> "ControlVector":
        return ControlVector(self.family, self.values.copy(), self.lower.copy(), self.upper.copy(),
                             np.copy(self.step_size))

    def with_values(self, values) -> "ControlVector":
        c = self.copy()
        c.values = np.asarray(values, dtype=float).ravel().copy()
        return c

    @classmethod
    def from_scene(cls, scene: Scene, family: str, lower=None, upper=None, step_size=1.0) -> "ControlVector":
        if family == "cloth":
            v = scene.materials.cloth.ravel()
        elif family == "solid":
            v = scene.materials.solid.ravel()
        elif family == "initial_velocity":
            v = scene.v0
        elif family == "initial_position":
            v = scene.x0
        elif family == "force_sequence":
            v = np.zeros(scene.n3 * scene.horizon) if scene.forces is None else scene.forces[:scene.horizon].ravel()
        elif family == "collider":
            v = np.concatenate([c.params for c in scene.colliders]) if scene.colliders else np.zeros(0)
        else:
            raise ValueError(f"unknown control family {family!r}")
        return cls(family, np.array(v, dtype=float), lower, upper, step_size)

    def apply(self, scene: Scene) -> Scene:
        """Scene with this family's entries replaced by ``values``."""
        f, v = self.family, self.values
        if scene.control_size(f) != len(v):
            raise ValueError(f"control vector has {len(v)} entries, scene expects {scene.control_size(f)}")
        if f == "cloth":
            m = scene.materials.copy()
            m.cloth = v.reshape(-1, 5).copy()
            return scene.with_(materials=m)
        if f == "solid":
            m = scene.materials.copy()
            m.solid = v.reshape(-1, 2).copy()
            return scene.with_(materials=m)
        if f == "initial_velocity":
            return scene.with_(v0=v.copy())
        if f == "initial_position":
            return scene.with_(x0=v.copy())
        if f == "force_sequence":
            return scene.with_(forces=v.reshape(scene.horizon, scene.n3).copy())
        cols, k = [], 0
        for c in scene.colliders:
            cols.append(c.with_params(v[k:k + c.nparam]) if c.nparam else c)
            k += c.nparam
        return scene.with_(colliders=cols)


def compute_gradient(scene: Scene, controls: ControlVector, goal, store: CheckpointStore | None = None,
                     cg_tol: float = 1e-8, solver: str = "cg"):
    """Forward simulate, evaluate the goal and return (phi, dphi/du, trajectory, adjoint result)."""
    sc = controls.apply(scene)
    traj = simulate(sc, sc.horizon, control_family=controls.family, store=store)
    phi = eval_goal(goal, traj, controls)
    gdx, gdv, du = goal_derivative_arrays(goal, traj, controls)
    adj = backward_pass(traj, sc, gdx, gdv, controls.family, tol=cg_tol, solver=solver)
    grad = adj.gradient + du
    return phi, grad, traj, adj


def _phi_at(scene, controls, goal, values):
    c = controls.with_values(values)
    sc = c.apply(scene)
    traj = simulate(sc, sc.horizon, differentiable=False)
    phi = eval_goal(goal, traj, c)
    if not np.isfinite(phi):
        raise FloatingPointError("non-finite goal value during finite differencing")
    return phi


def finite_difference_oracle(scene: Scene, controls: ControlVector, goal, i: int, h: float | None = None,
                             phi_fn=None) -> float:
    """Central difference of the goal in control entry ``i``.

    ``h=None`` picks the step by a Richardson check: among a ladder of
    steps, the pair (h, h/2) whose estimates agree best wins, and the
    extrapolated value is returned.  ``phi_fn(values)`` overrides the
    simulation for pure-goal checks.
    """
    f = phi_fn or (lambda vals: _phi_at(scene, controls, goal, vals))
    u = controls.values

    def central(hh):
        up = u.copy()
        dn = u.copy()
        up[i] += hh
        dn[i] -= hh
        return (f(up) - f(dn)) / (2.0 * hh)

    if h is not None:
        if not h > 0:
            raise ValueError("finite-difference step must be positive")
        return float(central(h))
    base = max(abs(u[i]), 1e-2) * 1e-2
    best = None
    prev = central(base)
    hh = base
    for _ in range(5):
        hh *= 0.25
        cur = central(hh)
        diff = abs(cur - prev)
        est = cur + (cur - prev) / 15.0
        if best is None or diff < best[0]:
            best = (diff, est)
        prev = cur
    return float(best[1])


def gradient_descent_step(controls: ControlVector, gradient, step_size=None) -> ControlVector:
    g = np.asarray(gradient, dtype=float).ravel()
    if g.shape != controls.values.shape:
        raise ValueError("gradient size does not match the control vector")
    eta = controls.step_size if step_size is None else step_size
    return controls.with_values(np.clip(controls.values - eta * g, controls.lower, controls.upper))


@dataclass
class OptimizationResult:
    controls: ControlVector
    history: list = field(default_factory=list)   # dicts: iteration, loss, grad_norm, seconds
    cg_residuals: list = field(default_factory=list)
    pinned_zero: bool = True

    @property
    def losses(self) -> np.ndarray:
        return np.array([h["loss"] for h in self.history])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["iteration", "loss", "grad_norm", "seconds"])
            w.writeheader()
            for row in self.history:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def run_optimization(scene: Scene, goal, controls: ControlVector, iterations: int, loss_floor: float = 0.0,
                     grad_floor: float = 1e-10, store: CheckpointStore | None = None, csv_path=None,
                     callback=None) -> OptimizationResult:
    """Fixed-step projected gradient descent.

    Every iteration simulates, evaluates the goal, runs the backward pass
    and takes one clamped step.  Stops after ``iterations`` steps or when
    the loss or the gradient norm falls to its floor; the loss of the final
    controls is always the last history entry.
    """
    store = CheckpointStore() if store is None else store
    res = OptimizationResult(controls.copy())
    pinned = np.repeat(scene.mass.pinned, 3)
    t0 = time.perf_counter()
    cur = controls.copy()
    for it in range(iterations + 1):
        try:
            phi, grad, traj, adj = compute_gradient(scene, cur, goal, store)
        except Exception as exc:
            raise RuntimeError(f"optimization failed at iteration {it}: {exc}") from exc
        gn = float(np.linalg.norm(grad))
        res.history.append({"iteration": it, "loss": phi, "grad_norm": gn, "seconds": time.perf_counter() - t0})
        res.cg_residuals.extend(c.residual for c in adj.cg)
        res.pinned_zero &= all(not np.any(st.z[pinned]) for st in adj.states)
        res.controls = cur
        if callback is not None:
            callback(it, phi, cur)
        logger.info("iteration %d loss %.6e |g| %.3e", it, phi, gn)
        if it == iterations or phi <= loss_floor or gn <= grad_floor:
            break
        cur = gradient_descent_step(cur, grad)
    if csv_path is not None:
        res.write_csv(csv_path)
    return res
