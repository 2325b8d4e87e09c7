import numpy as np
import pytest
import scipy.sparse as sp

import xpbdgrad.forward_solver as fs
from xpbdgrad.adjoint_engine import (ConvergenceError, backward_pass, backward_step, solve_direct,
                                     solve_filtered_cg)
from xpbdgrad.checkpoint import CheckpointStore
from xpbdgrad.core_model import SimConfig
from xpbdgrad.forward_solver import simulate
from xpbdgrad.inverse_opt import (ControlVector, KeyframeL2, compute_gradient, finite_difference_oracle,
                                  goal_derivative_arrays)
from xpbdgrad.presets import chain_scene, particle_scene, swatch_scene


def test_cg_identity():
    b = np.random.default_rng(0).normal(size=9)
    np.testing.assert_allclose(solve_filtered_cg(sp.identity(9), b), b, rtol=1e-12)


def test_cg_pinned_only_rhs_gives_zero():
    b = np.zeros(9)
    b[3:6] = [1.0, -2.0, 3.0]
    x = solve_filtered_cg(sp.identity(9) * 2.0, b, pinned=np.array([False, True, False]))
    assert not x.any()


def test_cg_random_spd_matches_dense():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(30, 30))
    A = a @ a.T + 30 * np.eye(30)
    b = rng.normal(size=30)
    x, info = solve_filtered_cg(sp.csr_matrix(A), b, full_output=True)
    ref = np.linalg.solve(A, b)
    assert np.linalg.norm(x - ref) <= 1e-8 * np.linalg.norm(ref)
    assert info.residual <= 1e-8


def test_cg_pinned_solution_is_exactly_zero_and_free_part_solves():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(12, 12))
    A = a @ a.T + 12 * np.eye(12)
    b = rng.normal(size=12)
    pin = np.array([True, False, False, True])
    x, info = solve_filtered_cg(sp.csr_matrix(A), b, pinned=pin, full_output=True)
    keep = ~np.repeat(pin, 3)
    assert not x[~keep].any()
    ref = np.linalg.solve(A[np.ix_(keep, keep)], b[keep])
    np.testing.assert_allclose(x[keep], ref, rtol=1e-7)
    assert info.residual <= 1e-8


def test_cg_failures_are_raised():
    with pytest.raises(ConvergenceError):
        A = np.block([[np.eye(3), 2 * np.eye(3)], [2 * np.eye(3), np.eye(3)]])
        solve_filtered_cg(sp.csr_matrix(A), np.array([1.0, 1, 1, -1, -1, -1]))
    rng = np.random.default_rng(3)
    a = rng.normal(size=(30, 30))
    with pytest.raises(ConvergenceError):
        solve_filtered_cg(sp.csr_matrix(a @ a.T + 1e-3 * np.eye(30)), np.ones(30), max_iter=2)


def test_direct_solve_handles_indefinite_system():
    A = np.block([[np.eye(3), 2 * np.eye(3)], [2 * np.eye(3), np.eye(3)]])
    b = np.array([1.0, 1, 1, -1, -1, -1])
    x, info = solve_direct(sp.csr_matrix(A), b)
    np.testing.assert_allclose(x, np.linalg.solve(A, b), rtol=1e-12)
    assert info.residual <= 1e-12
    pin = np.array([True, False])
    x, _ = solve_direct(sp.csr_matrix(A), b, pinned=pin)
    assert not x[:3].any()
    np.testing.assert_allclose(x[3:], b[3:], rtol=1e-12)


def test_direct_and_auto_solvers_match_cg():
    sc = swatch_scene(5, 0.4, horizon=4, pins="edge")
    cv = ControlVector.from_scene(sc, "initial_velocity")
    goal = KeyframeL2([4], [sc.x0 + 0.01])
    _, g_cg, _, _ = compute_gradient(sc, cv, goal)
    for solver in ("direct", "auto"):
        _, g, _, adj = compute_gradient(sc, cv, goal, solver=solver)
        np.testing.assert_allclose(g, g_cg, rtol=1e-6, atol=1e-12 * np.abs(g_cg).max())
        assert adj.max_cg_residual <= 1e-8
    with pytest.raises(ValueError):
        compute_gradient(sc, cv, goal, solver="qr")


def _spring(horizon=3, masses=(1.0, 1.0)):
    sc = chain_scene(masses, 0.5, 1e-3, pinned_top=False, horizon=horizon,
                     config=SimConfig(dt=0.01, pd_projection=False))
    return sc.with_(v0=np.array([0.1, 0.4, 0.0, -0.3, -0.2, 0.2]))


def test_zero_goal_gives_zero_adjoints():
    sc = _spring()
    traj = simulate(sc)
    z = np.zeros((4, 6))
    res = backward_pass(traj, sc, z, z, "initial_velocity")
    for st in res.states:
        assert not st.x_hat.any() and not st.gv.any()
    assert not res.gradient.any()


def test_free_particle_recursion():
    dt = 0.02
    sc = particle_scene(4, 1.0, v0=(1.0, 2.0, 0.0), config=SimConfig(dt=dt))
    traj = simulate(sc)
    rng = np.random.default_rng(4)
    gdx, gdv = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    res = backward_pass(traj, sc, gdx, gdv)
    st = res.states
    for n in range(1, 4):
        # adjoint of the prediction of step n-1 from that of step n
        rhs = 2 * st[n].x_hat - st[n + 1].gv / dt if n + 1 < 4 else 2 * st[n].x_hat - gdv[4] / dt
        expect = rhs + gdx[n] + gdv[n] / dt
        np.testing.assert_allclose(st[n - 1].x_hat, expect, rtol=1e-12, atol=1e-12)


def test_unequal_masses_match_unscaled_recursion():
    sc = _spring(1, masses=(1.0, 3.5))
    traj = simulate(sc)
    rec = traj.record(0)
    g = np.random.default_rng(5).normal(size=6)
    st = backward_step(rec, sc.mass, g, np.zeros(6), dt=sc.config.dt)
    Minv = np.diag(np.repeat(1 / sc.mass.mass, 3))
    dxdx = Minv @ rec.D.toarray()
    ref = np.linalg.solve((np.eye(6) - dxdx).T, g)
    np.testing.assert_allclose(st.x_hat, ref, rtol=1e-10, atol=1e-12)


def test_spring_initial_velocity_gradient_matches_fd():
    sc = _spring()
    goal = KeyframeL2([3], [simulate(sc, differentiable=False).states[3].x + 0.05])
    cv = ControlVector.from_scene(sc, "initial_velocity")
    _, g, _, _ = compute_gradient(sc, cv, goal)
    fd = np.array([finite_difference_oracle(sc, cv, goal, i) for i in range(6)])
    assert np.linalg.norm(g - fd) <= 1e-3 * np.linalg.norm(fd)


def test_regularizer_only_gradient():
    sc = particle_scene(3)
    goal = KeyframeL2([3], [[0.0, 0.0, 0.0]], weights=np.zeros(1), beta=2.0)
    u = np.array([0.5, -1.0, 2.0])
    cv = ControlVector("initial_velocity", u)
    _, g, _, _ = compute_gradient(sc, cv, goal)
    np.testing.assert_allclose(g, 2.0 * u, rtol=1e-14)


def test_single_step_force_gradient():
    dt = 0.05
    sc = particle_scene(1, 1.0, v0=(0.2, 0.0, 0.1), config=SimConfig(dt=dt))
    target = np.array([0.3, -0.1, 0.2])
    goal = KeyframeL2([1], [target])
    cv = ControlVector.from_scene(sc, "force_sequence")
    _, g, traj, _ = compute_gradient(sc, cv, goal)
    np.testing.assert_allclose(g, dt**2 * (traj.states[1].x - target), rtol=1e-12)
    assert finite_difference_oracle(sc, cv, goal, 0) == pytest.approx(g[0], rel=1e-6)


def test_projectile_initial_velocity_gradient():
    sc = particle_scene(10, 1.0, v0=(1.0, 2.0, 0.0), config=SimConfig(dt=0.02))
    goal = KeyframeL2([10], [[0.5, 0.5, 0.1]])
    cv = ControlVector.from_scene(sc, "initial_velocity")
    _, g, _, _ = compute_gradient(sc, cv, goal)
    for i in range(3):
        assert g[i] == pytest.approx(finite_difference_oracle(sc, cv, goal, i), rel=1e-3)


def test_backward_pass_is_linear_in_goal_derivatives():
    sc = swatch_scene(4, 0.3, 4, pins="edge", config=SimConfig(dt=0.005))
    traj = simulate(sc, control_family="cloth")
    rng = np.random.default_rng(6)
    gdx, gdv = rng.normal(size=(5, sc.n3)), rng.normal(size=(5, sc.n3))
    a = backward_pass(traj, sc, gdx, gdv, "cloth", tol=1e-13)
    b = backward_pass(traj, sc, 2 * gdx, 2 * gdv, "cloth", tol=1e-13)
    for sa, sb in zip(a.states, b.states):
        np.testing.assert_allclose(sb.x_hat, 2 * sa.x_hat, rtol=1e-12, atol=1e-12 * np.abs(sa.x_hat).max())
        np.testing.assert_allclose(sb.gv, 2 * sa.gv, rtol=1e-12, atol=1e-12 * np.abs(sa.gv).max())
    np.testing.assert_allclose(b.gradient, 2 * a.gradient, rtol=1e-10)


def test_backward_pass_never_reruns_the_forward(monkeypatch):
    sc = swatch_scene(4, 0.3, 4, pins="edge")
    goal = KeyframeL2([2, 4], [sc.x0, sc.x0])
    cv = ControlVector.from_scene(sc, "cloth")
    store = CheckpointStore()
    traj = simulate(sc, control_family="cloth", store=store)
    gdx, gdv, _ = goal_derivative_arrays(goal, traj, cv)
    requested = []
    orig = store.get

    def spy(n):
        requested.append(n)
        return orig(n)

    monkeypatch.setattr(store, "get", spy)
    monkeypatch.setattr(fs, "step_forward", lambda *a, **k: pytest.fail("forward step during backward pass"))
    res = backward_pass(traj, sc, gdx, gdv, "cloth")
    assert set(requested) == set(range(4))
    assert res.max_cg_residual <= 1e-8


def test_backward_records_cg_contract():
    sc = swatch_scene(5, 0.4, 5, pins="edge")
    goal = KeyframeL2([5], [sc.x0])
    _, _, traj, adj = compute_gradient(sc, ControlVector.from_scene(sc, "force_sequence"), goal)
    pin = np.repeat(sc.mass.pinned, 3)
    assert len(adj.cg) == 5
    for st in adj.states:
        assert st.cg.residual <= 1e-8
        assert not st.z[pin].any() and not st.x_hat[pin].any()


def test_unrolled_mode_matches_fd_on_cloth():
    cfg = SimConfig(dt=0.005, derivative_mode="unrolled")
    sc = swatch_scene(4, 0.3, 4, pins="edge", config=cfg)
    goal = KeyframeL2([4], [simulate(sc, differentiable=False).states[4].x + 0.01])
    cv = ControlVector.from_scene(sc, "cloth")
    _, g, _, _ = compute_gradient(sc, cv, goal)
    for i in range(5):
        assert g[i] == pytest.approx(finite_difference_oracle(sc, cv, goal, i), rel=1e-5)
