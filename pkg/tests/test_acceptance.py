"""Acceptance criteria 1 to 10.

Each test records a one-line verdict in ``RESULTS``; ``conftest.py`` prints
them after the run, and ``python tests/test_acceptance.py`` runs the suite
standalone.
"""

import functools
import time

import numpy as np
import pytest

from xpbdgrad import kernels as K
from xpbdgrad.collision import Sphere
from xpbdgrad.core_model import SimConfig
from xpbdgrad.derivative_engine import project_blocks, verify_derivative_blocks
from xpbdgrad.forward_solver import simulate
from xpbdgrad.inverse_opt import (ControlVector, KeyframeL2, compute_gradient, eval_goal, finite_difference_oracle,
                                  run_optimization)
from xpbdgrad.presets import chain_scene, swatch_scene, tet_bar_scene

FD_REL_TOL = 1e-3
C1_SECONDS = 60.0
C2_SECONDS = 10.0
BLOCK_TOL = 1e-6
VERIFY_TRIALS = 100
EIG_FLOOR = -1e-10
DESCENT_TRIALS = 100
DESCENT_FRACTION = 0.95
RECOVERY_TOL = 0.10
C5_MAX_ITERS = 300
C5_SECONDS = 15 * 60.0
C6_SECONDS = 15 * 60.0
C7_MAX_ITERS = 500
C7_RATIO = 1e-4
C8_RATIO = 1e-3
CG_TOL = 1e-8
OVERHEAD_BOUND = 5.0

RESULTS = {}


def record(k, ok, detail):
    RESULTS[k] = (bool(ok), detail)
    assert ok, f"criterion {k}: {detail}"


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


# ---------------------------------------------------------------- 1

def test_criterion_01_adjoint_matches_fd_per_family():
    t0 = time.perf_counter()
    cfg = SimConfig(pd_projection=False, collision_thickness=0.005)
    sc = swatch_scene(5, 0.4, 5, config=cfg, colliders=[Sphere([0.2, -0.25, 0.2], 0.243)])
    X = sc.mesh.rest_positions
    v0 = np.stack([0.3 * np.sin(3 * X[:, 2]), -0.4 + 0.2 * X[:, 0], 0.2 * np.cos(2 * X[:, 0])], 1)
    v0[sc.mass.pinned] = 0.0
    sc = sc.with_(v0=v0.ravel())
    rng = np.random.default_rng(0)
    tr = simulate(sc, 5, differentiable=False)
    contacts = sum(tr.record(n).n_collisions for n in range(5))
    goal = KeyframeL2([3, 5], [tr.states[s].x + rng.normal(0, 0.01, sc.n3) for s in (3, 5)])
    free = np.nonzero(~np.repeat(sc.mass.pinned, 3))[0]
    checks = {
        "bend b": ("cloth", [4]),
        "membrane C00 C11 C01 C22": ("cloth", [0, 1, 2, 3]),
        "initial velocity": ("initial_velocity", rng.choice(free, 10, replace=False)),
        "force": ("force_sequence", rng.choice(sc.n3 * 5, 10, replace=False)),
        "sphere radius": ("collider", [3]),
    }
    worst = {}
    for name, (fam, entries) in checks.items():
        cv = ControlVector.from_scene(sc, fam)
        _, g, _, _ = compute_gradient(sc, cv, goal)
        worst[name] = max(_rel(g[i], finite_difference_oracle(sc, cv, goal, int(i))) for i in entries)
    secs = time.perf_counter() - t0
    ok = contacts > 0 and max(worst.values()) <= FD_REL_TOL and secs < C1_SECONDS
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {contacts} contacts; {secs:.1f} s"
    record(1, ok, detail)


# ---------------------------------------------------------------- 2

def _tet_bar(mode):
    sc = tet_bar_scene(config=SimConfig(pd_projection=False, derivative_mode=mode), lame=(300.0, 1000.0))
    rng = np.random.default_rng(0)
    tr = simulate(sc, 5, differentiable=False)
    goal = KeyframeL2([5], [tr.states[5].x + rng.normal(0, 0.001, sc.n3)],
                      velocities=[rng.normal(0, 0.01, sc.n3)])
    cv = ControlVector.from_scene(sc, "solid")
    _, g, _, _ = compute_gradient(sc, cv, goal)
    return [_rel(g[i], finite_difference_oracle(sc, cv, goal, i)) for i in range(2)]


def test_criterion_02_volumetric_adjoint_matches_fd():
    t0 = time.perf_counter()
    err = _tet_bar("unrolled")
    secs = time.perf_counter() - t0
    # the closed-form derivative assumes force balance, which this bar never reaches in 5 steps
    closed = _tet_bar("converged")
    ok = max(err) <= FD_REL_TOL and secs < C2_SECONDS
    record(2, ok, f"unrolled da {err[0]:.1e} db {err[1]:.1e} in {secs:.1f} s; "
                  f"closed-form mode da {closed[0]:.1e} db {closed[1]:.1e} (not gated)")


# ---------------------------------------------------------------- 3

def _random_step(seed, kind):
    rng = np.random.default_rng(seed)
    cfg = SimConfig(dt=0.01, pd_projection=False, keep_raw_blocks=True)
    if kind == "distance":
        sc = chain_scene(masses=rng.uniform(0.5, 2.0, 4), compliance=10 ** rng.uniform(-6, -2), pinned_top=False,
                         config=cfg)
        fam = None
    elif kind == "cloth":
        sc = swatch_scene(5, 0.4, 1, config=cfg, pins="edge")
        fam = "cloth"
    else:
        sc = tet_bar_scene(cells=(2, 1, 1), config=cfg, lame=tuple(rng.uniform(5.0, 50.0, 2)), pins="none")
        fam = "solid"
    x0 = sc.x0 * np.tile(rng.uniform(0.8, 1.3, 3), sc.mesh.vertex_count) + rng.normal(0, 0.01, sc.n3)
    v0 = rng.normal(0, 0.3, sc.n3)
    v0[np.repeat(sc.mass.pinned, 3)] = 0.0
    return simulate(sc.with_(x0=x0, v0=v0, horizon=1), control_family=fam).record(0)


def test_criterion_03_block_verification():
    families = {"distance": [K.DISTANCE], "cloth": [K.MEMBRANE, K.BEND], "solid": [K.TET_HYDRO, K.TET_DEV]}
    worst = {K.KIND_NAMES[k]: [0.0, 0.0, 0] for ks in families.values() for k in ks}
    for scene_kind, kinds in families.items():
        for seed in range(VERIFY_TRIALS):
            rec = _random_step(seed, scene_kind)
            for k in kinds:
                sel = rec.kinds == k
                rep = verify_derivative_blocks(rec.raw_blocks[sel], rec.kinds[sel], rec.active[sel])
                w = worst[K.KIND_NAMES[k]]
                w[0], w[1], w[2] = max(w[0], rep.max_asymmetry), max(w[1], rep.max_row_sum), w[2] + 1
    ok = all(a <= BLOCK_TOL and r <= BLOCK_TOL and n == VERIFY_TRIALS for a, r, n in worst.values())
    record(3, ok, "; ".join(f"{k} asym {a:.1e} rowsum {r:.1e}" for k, (a, r, _) in worst.items()))


# ---------------------------------------------------------------- 4

def _descent_trial(seed):
    rng = np.random.default_rng(seed)
    fam = ("cloth", "initial_velocity")[seed % 2]
    sc = swatch_scene(5, 0.4, 5, config=SimConfig(dt=0.01, pd_projection=True))
    x0 = sc.x0 * np.tile(rng.uniform(0.8, 1.3, 3), 25) + rng.normal(0, 0.01, sc.n3)
    v0 = rng.normal(0, 0.3, sc.n3)
    v0[np.repeat(sc.mass.pinned, 3)] = 0.0
    sc = sc.with_(x0=x0, v0=v0)
    tr = simulate(sc, 5, differentiable=False)
    goal = KeyframeL2([5], [tr.states[5].x + rng.normal(0, 0.02, sc.n3)])
    cv = ControlVector.from_scene(sc, fam)
    _, g, _, _ = compute_gradient(sc, cv, goal)
    entries = range(cv.size) if fam == "cloth" else np.nonzero(~np.repeat(sc.mass.pinned, 3))[0]
    fd = np.zeros(cv.size)
    for i in entries:
        fd[i] = finite_difference_oracle(sc, cv, goal, int(i), h=1e-6 * max(1.0, abs(cv.values[i])))
    return float(g @ fd)


def test_criterion_04_pd_projection():
    min_eig = np.inf
    for seed in range(20):
        rec = _random_step(seed, "cloth")
        blocks = rec.raw_blocks.copy()
        project_blocks(rec.kinds, blocks, rec.active)
        for j in np.nonzero(rec.active)[0]:
            n3 = 3 * int(K.STENCIL_SIZE[rec.kinds[j]])
            min_eig = min(min_eig, np.linalg.eigvalsh(-blocks[j, :n3, :n3]).min())
    positive = sum(_descent_trial(s) > 0 for s in range(DESCENT_TRIALS))
    frac = positive / DESCENT_TRIALS
    ok = min_eig >= EIG_FLOOR and frac >= DESCENT_FRACTION
    record(4, ok, f"min eigenvalue {min_eig:.1e}; positive inner product in {positive}/{DESCENT_TRIALS} trials")


# ---------------------------------------------------------------- 5 to 8

@functools.lru_cache(maxsize=None)
def run_c5():
    sc = swatch_scene(21, 1.0, 20, pins="corners", config=SimConfig(dt=0.01))
    tr = simulate(sc, sc.horizon, differentiable=False)
    steps = list(range(1, 21))
    goal = KeyframeL2(steps, [tr.states[n].x for n in steps])
    true = sc.materials.cloth.ravel().copy()
    u0, lo, hi = true.copy(), true.copy(), true.copy()
    u0[:2] *= 4.0
    lo[:2], hi[:2] = 0.5, 100.0
    t0 = time.perf_counter()
    res = run_optimization(sc, goal, ControlVector("cloth", u0, lo, hi, 300.0), 40)
    return res, true, time.perf_counter() - t0


@functools.lru_cache(maxsize=None)
def run_c6():
    size, radius = 0.6, 0.3
    sphere = Sphere(np.array([size / 2, -radius - 0.01, size / 2]), radius)
    sc = swatch_scene(11, size, 30, pins="none", config=SimConfig(dt=0.01, collision_thickness=0.005),
                      colliders=[sphere])
    tr = simulate(sc, sc.horizon, differentiable=False)
    contacts = tr.record(sc.horizon - 1).n_collisions
    steps = list(range(5, 31, 5))
    goal = KeyframeL2(steps, [tr.states[n].x for n in steps])
    true = sc.materials.cloth.ravel().copy()
    u0, lo, hi = true.copy(), true.copy(), true.copy()
    u0[4] *= 5.0
    lo[4], hi[4] = 1e-6, 1.0
    t0 = time.perf_counter()
    res = run_optimization(sc, goal, ControlVector("cloth", u0, lo, hi, 1.5e-5), 30)
    return res, true, contacts, time.perf_counter() - t0


@functools.lru_cache(maxsize=None)
def run_c7():
    sc = swatch_scene(9, 0.4, 30, pins="none")
    target = (sc.x0.reshape(-1, 3) + np.array([0.1, 0.05, -0.03])).ravel()
    goal = KeyframeL2([30], [target])
    cv = ControlVector.from_scene(sc, "initial_velocity", step_size=400.0)
    phi0 = eval_goal(goal, simulate(sc, differentiable=False), cv)
    res = run_optimization(sc, goal, cv, C7_MAX_ITERS, loss_floor=C7_RATIO * phi0)
    return res, cv.size


@functools.lru_cache(maxsize=None)
def run_c8():
    sc = swatch_scene(5, 0.4, 60, pins="edge")
    m, t = sc.mass.mass, np.arange(60) * sc.config.dt
    wind = np.zeros((60, 25, 3))
    wind[:, :, 2] = (3.0 * m)[None, :] * (1 + np.sin(20 * t))[:, None]
    wind[:, :, 0] = m[None, :] * np.cos(15 * t)[:, None]
    ref = simulate(sc.with_(forces=wind.reshape(60, -1)), differentiable=False)
    goal = KeyframeL2([30, 60], [ref.states[30].x, ref.states[60].x])
    cv = ControlVector.from_scene(sc, "force_sequence", step_size=1.6)
    res = run_optimization(sc, goal, cv, 300)
    return res, cv.size


def test_criterion_05_material_recovery():
    res, true, secs = run_c5()
    err = np.abs(res.controls.values[:2] - true[:2]) / true[:2]
    iters = res.history[-1]["iteration"]
    ok = err.max() <= RECOVERY_TOL and iters <= C5_MAX_ITERS and secs < C5_SECONDS
    record(5, ok, f"C00 err {err[0]:.1e}, C11 err {err[1]:.1e} after {iters} iterations, {secs:.0f} s")


def test_criterion_06_bend_recovery_through_contact():
    res, true, contacts, secs = run_c6()
    err = abs(res.controls.values[4] - true[4]) / true[4]
    ok = contacts > 0 and err <= RECOVERY_TOL and secs < C6_SECONDS
    record(6, ok, f"b err {err:.1e} after {res.history[-1]['iteration']} iterations, "
                  f"{contacts} contacts at the last step, {secs:.0f} s")


def test_criterion_07_initial_velocity():
    res, n = run_c7()
    ratio = res.losses[-1] / res.losses[0]
    iters = res.history[-1]["iteration"]
    ok = n == 243 and ratio <= C7_RATIO and iters <= C7_MAX_ITERS
    record(7, ok, f"{n} DoFs, loss ratio {ratio:.1e} after {iters} iterations")


def test_criterion_08_force_sequence():
    res, n = run_c8()
    ratio = res.losses[-1] / res.losses[0]
    ok = n == 4500 and ratio <= C8_RATIO
    record(8, ok, f"{n} DoFs, loss ratio {ratio:.1e} after {res.history[-1]['iteration']} iterations")


def test_criterion_09_filtered_cg():
    runs = {"5": run_c5()[0], "6": run_c6()[0], "7": run_c7()[0], "8": run_c8()[0]}
    worst = max(max(r.cg_residuals) for r in runs.values())
    solves = sum(len(r.cg_residuals) for r in runs.values())
    pinned = all(r.pinned_zero for r in runs.values())
    ok = pinned and worst <= CG_TOL
    record(9, ok, f"{solves} backward solves, max relative residual {worst:.2e}, pinned entries zero: {pinned}")


# ---------------------------------------------------------------- 10

def test_criterion_10_differentiable_overhead():
    sc = swatch_scene(21, 1.0, 20, pins="corners")
    plain, diff = np.inf, np.inf
    for _ in range(3):
        t0 = time.perf_counter()
        simulate(sc, differentiable=False)
        plain = min(plain, time.perf_counter() - t0)
        t0 = time.perf_counter()
        simulate(sc, control_family="cloth")
        diff = min(diff, time.perf_counter() - t0)
    ratio = diff / plain
    record(10, ratio <= OVERHEAD_BOUND,
           f"{1e3 * diff / 20:.2f} ms vs {1e3 * plain / 20:.2f} ms per step, ratio {ratio:.2f}")


if __name__ == "__main__":
    import sys

    code = pytest.main([__file__, "-q"])
    sys.exit(code)
