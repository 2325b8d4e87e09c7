"""XPBD forward stepping with Gauss-Seidel constraint sweeps.

Solve order inside one sweep is the row order of the step's constraint
table: the object's elastic rows (distance, membrane, bend, tet pairs) as
built, followed by this step's collision rows sorted by vertex id.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numba import njit

from . import kernels as K
from .collision import collider_offsets, detect_proximities, make_collision_constraints
from .constraints import ConstraintSet
from .core_model import SimState, finalize_velocities, predict_positions
from .derivative_engine import (accumulate_control_derivative, accumulate_position_derivative, assemble_control_blocks,
                                assemble_sparse, converged_blocks, det3, project_blocks, small_inverse)

logger = logging.getLogger(__name__)

J_FLOOR = 1e-12


class SimulationError(RuntimeError):
    pass


@njit(cache=True)
def _gather(x, w, idx_j, s):
    xl = np.zeros((4, 3))
    wl = np.zeros(12)
    for a in range(s):
        xl[a] = x[idx_j[a]]
        wl[3 * a:3 * a + 3] = w[idx_j[a]]
    return xl, wl


@njit(cache=True)
def _visit(j, x, w, kinds, idx, prm, at, lam, accumulate, ucol, dat, blocks, S, pblk, T, skipped):
    """Project one constraint with the compliant multiplier update and optionally accumulate."""
    kind = kinds[j]
    s = K.STENCIL_SIZE[kind]
    xl, wl = _gather(x, w, idx[j], s)
    ok, m, C, G, H = K.eval_local(kind, xl, prm[j], accumulate)
    if not ok:
        skipped[j] += 1
        return 0.0
    J = (G[:m] * wl) @ np.ascontiguousarray(G[:m].T) + at[j, :m, :m]
    if m == 1:
        if J[0, 0] < J_FLOOR:
            skipped[j] += 1
            return 0.0
    else:
        if abs(det3(J)) < J_FLOOR ** 3:
            skipped[j] += 1
            return 0.0
    Jinv = small_inverse(J, m)
    lam_prev = lam[j, :m].copy()
    atj = np.ascontiguousarray(at[j, :m, :m])
    b = -C[:m] - atj @ lam_prev
    dl = Jinv @ b
    clamped = False
    if K.is_collision(kind):
        if lam_prev[0] + dl[0] < 0.0:
            dl[0] = -lam_prev[0]
            clamped = True
    lam[j, :m] += dl
    GT = np.ascontiguousarray(G[:m].T)
    dx = wl * (GT @ dl)
    for a in range(s):
        for c in range(3):
            x[idx[j, a], c] += dx[3 * a + c]
    if accumulate:
        accumulate_position_derivative(m, G, H, wl, dl, Jinv, at[j], S[j], blocks[j], clamped)
        nu = 0
        while nu < 7 and ucol[j, nu] >= 0:
            nu += 1
        if nu > 0:
            dC = np.zeros(7)
            dG = np.zeros((7, 12))
            if kind == K.COL_SPHERE or kind == K.COL_CAPSULE or kind == K.COL_PLANE:
                nu2, dC, dG = K.collider_param_derivatives(kind, xl, prm[j])
            accumulate_control_derivative(m, nu, G, wl, dl, lam_prev, Jinv, at[j], dat[j], dC, dG, T[j], pblk[j],
                                          clamped)
    res = 0.0
    for r in range(m):
        res += C[r] * C[r]
    return res


@njit(cache=True)
def _project(j, x, w, kinds, idx, prm, at, lam, xl, wl, C, G, H, J, b, dl):
    """Allocation-free projection of constraint j; returns C^T C, or -1 if skipped."""
    kind = kinds[j]
    s = K.STENCIL_SIZE[kind]
    xl[:] = 0.0
    wl[:] = 0.0
    for a in range(s):
        v = idx[j, a]
        for c in range(3):
            xl[a, c] = x[v, c]
            wl[3 * a + c] = w[v]
    ok, m = K.eval_into(kind, xl, prm[j], False, C, G, H)
    if not ok:
        return -1.0
    n3 = 3 * s
    for r in range(m):
        for q in range(r, m):
            acc = at[j, r, q]
            for i in range(n3):
                acc += G[r, i] * wl[i] * G[q, i]
            J[r, q] = acc
            J[q, r] = acc if q == r else acc - at[j, r, q] + at[j, q, r]
    for r in range(m):
        acc = -C[r]
        for q in range(m):
            acc -= at[j, r, q] * lam[j, q]
        b[r] = acc
    if m == 1:
        if J[0, 0] < J_FLOOR:
            return -1.0
        dl[0] = b[0] / J[0, 0]
    else:
        d = det3(J)
        if abs(d) < J_FLOOR ** 3:
            return -1.0
        # Cramer's rule for the 3x3 block
        dl[0] = (b[0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1]) - J[0, 1] * (b[1] * J[2, 2] - J[1, 2] * b[2])
                 + J[0, 2] * (b[1] * J[2, 1] - J[1, 1] * b[2])) / d
        dl[1] = (J[0, 0] * (b[1] * J[2, 2] - J[1, 2] * b[2]) - b[0] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
                 + J[0, 2] * (J[1, 0] * b[2] - b[1] * J[2, 0])) / d
        dl[2] = (J[0, 0] * (J[1, 1] * b[2] - b[1] * J[2, 1]) - J[0, 1] * (J[1, 0] * b[2] - b[1] * J[2, 0])
                 + b[0] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0])) / d
    if kind >= K.COL_SPHERE and lam[j, 0] + dl[0] < 0.0:
        dl[0] = -lam[j, 0]
    res = 0.0
    for r in range(m):
        lam[j, r] += dl[r]
        res += C[r] * C[r]
    for a in range(s):
        v = idx[j, a]
        for c in range(3):
            i = 3 * a + c
            acc = 0.0
            for r in range(m):
                acc += G[r, i] * dl[r]
            x[v, c] += wl[i] * acc
    return res


@njit(cache=True)
def gauss_seidel(x, w, kinds, idx, prm, at, lam, iters, accumulate, ucol, dat, blocks, S, pblk, T, skipped):
    """Run ``iters`` sweeps in place; returns squared constraint residual per sweep."""
    n = len(kinds)
    hist = np.zeros(iters)
    xl = np.zeros((4, 3))
    wl = np.zeros(12)
    C = np.zeros(3)
    G = np.zeros((3, 12))
    H = np.zeros((0, 12, 12))
    J = np.zeros((3, 3))
    b = np.zeros(3)
    dl = np.zeros(3)
    for it in range(iters):
        res = 0.0
        for j in range(n):
            if accumulate:
                res += _visit(j, x, w, kinds, idx, prm, at, lam, accumulate, ucol, dat, blocks, S, pblk, T, skipped)
            else:
                r = _project(j, x, w, kinds, idx, prm, at, lam, xl, wl, C, G, H, J, b, dl)
                if r < 0.0:
                    skipped[j] += 1
                else:
                    res += r
        hist[it] = res
    return hist


@njit(cache=True)
def gauss_seidel_taped(x, w, kinds, idx, prm, at, iters, tape_x, tape_lam, tape_flag):
    """Replay of the sweeps that records, per visit, the local stencil
    positions and the multiplier before the update.

    ``tape_flag`` is 0 for a skipped visit, 1 for a regular update and 2
    for a collision row clamped at zero.
    """
    n = len(kinds)
    lam = np.zeros((n, 3))
    for it in range(iters):
        for j in range(n):
            v = it * n + j
            kind = kinds[j]
            s = K.STENCIL_SIZE[kind]
            xl, wl = _gather(x, w, idx[j], s)
            tape_x[v] = xl
            tape_lam[v] = lam[j]
            ok, m, C, G, H = K.eval_local(kind, xl, prm[j], False)
            tape_flag[v] = 0
            if not ok:
                continue
            GT = np.ascontiguousarray(G[:m].T)
            J = (G[:m] * wl) @ GT + at[j, :m, :m]
            if m == 1:
                if J[0, 0] < J_FLOOR:
                    continue
            elif abs(det3(J)) < J_FLOOR ** 3:
                continue
            atj = np.ascontiguousarray(at[j, :m, :m])
            dl = small_inverse(J, m) @ (-C[:m] - atj @ lam[j, :m])
            tape_flag[v] = 1
            if K.is_collision(kind) and lam[j, 0] + dl[0] < 0.0:
                dl[0] = -lam[j, 0]
                tape_flag[v] = 2
            lam[j, :m] += dl
            dx = wl * (GT @ dl)
            for a in range(s):
                for c in range(3):
                    x[idx[j, a], c] += dx[3 * a + c]


def solve_constraint_iteration(x, lam, constraints: ConstraintSet, inv_mass, alpha_tilde):
    """One Gauss-Seidel sweep over ``constraints``; returns (x, lam, per-row (dlam, J, b)).

    Convenience wrapper used for inspection and tests; the stepping code
    calls the compiled sweep directly.
    """
    p = np.array(x, dtype=float).reshape(-1, 3)
    lam = np.array(lam, dtype=float).reshape(len(constraints), 3)
    info = []
    for j in range(len(constraints)):
        kind = constraints.kinds[j]
        s = int(K.STENCIL_SIZE[kind])
        xl, wl = _gather(p, inv_mass, constraints.idx[j], s)
        ok, m, C, G, _ = K.eval_local(kind, xl, constraints.prm[j], False)
        if not ok:
            info.append(None)
            continue
        J = (G[:m] * wl) @ G[:m].T + alpha_tilde[j, :m, :m]
        if (m == 1 and J[0, 0] < J_FLOOR) or (m > 1 and abs(det3(J)) < J_FLOOR ** 3):
            info.append(None)
            continue
        b = -C[:m] - alpha_tilde[j, :m, :m] @ lam[j, :m]
        dl = np.linalg.solve(J, b)
        if K.is_collision(kind) and lam[j, 0] + dl[0] < 0:
            dl[0] = -lam[j, 0]
        lam[j, :m] += dl
        dx = wl * (G[:m].T @ dl)
        p[constraints.idx[j, :s]] += dx[:3 * s].reshape(s, 3)
        info.append((dl, J, b))
    return p.ravel(), lam, info


@dataclass
class ForwardRecord:
    step: int
    x0: np.ndarray
    v0: np.ndarray
    x1: np.ndarray
    v1: np.ndarray
    lam: np.ndarray
    n_collisions: int
    D: sp.csr_matrix | None = None
    P: sp.csr_matrix | None = None
    residuals: np.ndarray | None = None
    raw_blocks: np.ndarray | None = None
    kinds: np.ndarray | None = None
    idx: np.ndarray | None = None
    active: np.ndarray | None = None
    timings: dict = field(default_factory=dict)
    # unrolled mode: what the backward pass needs to replay the sweeps
    replay: dict | None = None


@dataclass
class Trajectory:
    states: list
    store: object
    control_family: str | None = None
    n_controls: int = 0

    @property
    def horizon(self) -> int:
        return len(self.states) - 1

    def record(self, n: int) -> ForwardRecord:
        return self.store.get(n)

    def positions(self) -> np.ndarray:
        return np.array([s.x for s in self.states])

    def timings(self) -> dict:
        tot: dict = {}
        for n in range(self.horizon):
            for k, v in self.record(n).timings.items():
                tot[k] = tot.get(k, 0.0) + v
        return tot


def _collision_table(scene, xt):
    cfg = scene.config
    if not scene.colliders and not cfg.self_collision:
        return ConstraintSet.empty(), []
    prox = detect_proximities(xt, scene.colliders, scene.mesh, cfg.collision_thickness, cfg.margin,
                              cfg.self_collision)
    rows = make_collision_constraints(prox, cfg.collision_thickness, cfg.collision_compliance, scene.colliders)
    if not rows:
        return ConstraintSet.empty(), prox
    n = len(rows)
    idx = np.zeros((n, 4), dtype=np.int64)
    prm = np.zeros((n, K.N_PARAMS))
    for i, r in enumerate(rows):
        idx[i, :len(r.stencil)] = r.stencil
        prm[i, :len(r.params)] = r.params
    cs = ConstraintSet([r.kind for r in rows], idx, prm, [r.material for r in rows], np.zeros(n),
                       [r.alpha for r in rows])
    return cs, prox


class StepContext:
    """Per-simulation constants: elastic compliances and control maps."""

    def __init__(self, scene, control_family=None, differentiable=True):
        self.scene = scene
        self.family = control_family
        self.differentiable = differentiable
        cfg = scene.config
        cs = scene.constraints
        self.elastic_at = cs.compliance_tilde(scene.materials, cfg.dt)
        if control_family in ("cloth", "solid"):
            self.elastic_ucol, self.elastic_dat = cs.control_map(control_family, scene.materials, cfg.dt)
        else:
            self.elastic_ucol = -np.ones((len(cs), 7), dtype=np.int64)
            self.elastic_dat = np.zeros((len(cs), 7, 3, 3))
        self.n_controls = scene.control_size(control_family)
        self.offsets = collider_offsets(scene.colliders)


def step_forward(scene, state: SimState, ctx: StepContext) -> tuple[SimState, ForwardRecord]:
    cfg = scene.config
    dt = cfg.dt
    n = state.time_index
    t0 = time.perf_counter()
    f_ext = scene.external_force(n)
    xt = predict_positions(state, f_ext, scene.mass, cfg, scene.pin_target(n + 1))
    ccs, prox = _collision_table(scene, xt)
    table = ConstraintSet.concat([scene.constraints, ccs])
    ne = len(scene.constraints)
    nt = len(table)
    at = np.zeros((nt, 3, 3))
    at[:ne] = ctx.elastic_at
    at[ne:, 0, 0] = ccs.alpha / dt**2
    ucol = -np.ones((nt, 7), dtype=np.int64)
    dat = np.zeros((nt, 7, 3, 3))
    ucol[:ne] = ctx.elastic_ucol
    dat[:ne] = ctx.elastic_dat
    if ctx.family == "collider" and len(ccs):
        for i in range(len(ccs)):
            c = int(ccs.material[i])
            if c < 0:
                continue
            npar = scene.colliders[c].nparam
            ucol[ne + i, :npar] = ctx.offsets[c] + np.arange(npar)

    x = xt.reshape(-1, 3).copy()
    w = scene.mass.inv_mass
    lam = np.zeros((nt, 3))
    unrolled = ctx.differentiable and cfg.derivative_mode == "unrolled"
    diff = ctx.differentiable and not unrolled
    iterative = diff and cfg.derivative_mode == "iterative"
    blocks = np.zeros((nt, 12, 12)) if diff else np.zeros((0, 12, 12))
    pblk = np.zeros((nt, 12, 7)) if diff else np.zeros((0, 12, 7))
    if iterative:
        S = np.zeros((nt, 3, 12))
        T = np.zeros((nt, 3, 7))
    else:
        S = np.zeros((0, 3, 12))
        T = np.zeros((0, 3, 7))
    skipped = np.zeros(nt, dtype=np.int64)
    hist = gauss_seidel(x, w, table.kinds, table.idx, table.prm, at, lam, cfg.constraint_iterations, iterative,
                        ucol, dat, blocks, S, pblk, T, skipped)
    if not np.all(np.isfinite(x)):
        bad = int(np.nonzero(~np.isfinite(x).all(axis=1))[0][0])
        raise SimulationError(f"non-finite position at step {n}, vertex {bad}")
    if skipped.any():
        logger.debug("step %d: %d degenerate constraint visits skipped", n, int(skipped.sum()))

    x1 = x.ravel()
    v1 = finalize_velocities(x1, state.x, dt)
    rec = ForwardRecord(n, state.x.copy(), state.v.copy(), x1.copy(), v1.copy(), lam, len(ccs), residuals=hist)
    if diff:
        active = np.ones(nt, dtype=bool)
        if iterative:
            for j in range(ne, nt):
                active[j] = np.any(blocks[j] != 0.0)
        else:
            active[:] = False
            converged_blocks(x, w, table.kinds, table.idx, table.prm, at, lam, ucol, dat, blocks, pblk, active)
        if cfg.keep_raw_blocks:
            rec.raw_blocks = blocks.copy()
        if iterative:
            # accumulated blocks are symmetric only in the converged limit
            blocks[:] = 0.5 * (blocks + blocks.transpose(0, 2, 1))
        if cfg.pd_projection:
            project_blocks(table.kinds, blocks, active)
        t1 = time.perf_counter()
        free = ~scene.mass.pinned
        rec.D = assemble_sparse(blocks, table.idx, table.kinds, scene.mesh.vertex_count, active, free)
        if ctx.n_controls and ctx.family in ("cloth", "solid", "collider"):
            rec.P = assemble_control_blocks(pblk, table.idx, table.kinds, ucol, scene.mesh.vertex_count,
                                            ctx.n_controls, free)
        rec.kinds, rec.idx, rec.active = table.kinds, table.idx, active
        t2 = time.perf_counter()
        rec.timings = {"forward": t1 - t0, "assembly": t2 - t1}
    else:
        rec.timings = {"forward": time.perf_counter() - t0}
    if unrolled:
        rec.replay = {"x_tilde": xt.copy(), "kinds": table.kinds, "idx": table.idx, "prm": table.prm, "at": at,
                      "ucol": ucol, "dat": dat, "iters": cfg.constraint_iterations}
    return SimState(x1, v1, n + 1), rec


def simulate(scene, n_steps: int | None = None, control_family: str | None = None, store=None,
             differentiable: bool = True) -> Trajectory:
    """Run ``n_steps`` chained steps, persisting every record in ``store``."""
    from .checkpoint import CheckpointStore

    N = scene.horizon if n_steps is None else n_steps
    if N < 0:
        raise ValueError("number of steps must be >= 0")
    store = CheckpointStore() if store is None else store
    store.clear()
    ctx = StepContext(scene, control_family, differentiable)
    state = scene.initial_state()
    states = [state]
    for _ in range(N):
        state, rec = step_forward(scene, state, ctx)
        store.put(rec.step, rec)
        states.append(state)
    return Trajectory(states, store, control_family, ctx.n_controls)
