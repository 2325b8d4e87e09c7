import numpy as np
import pytest

from xpbdgrad.constraints import ConstraintSet, MaterialParams
from xpbdgrad.core_model import (MassModel, Mesh, MeshError, SimConfig, SimState, build_sim_object,
                                 finalize_velocities, grid_swatch, predict_positions, tet_bar)
from xpbdgrad.forward_solver import simulate
from xpbdgrad.scene import Scene


def test_right_triangle_lumps_a_third_of_the_area():
    mesh = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    mass, rest = build_sim_object(mesh, 1.0)
    assert rest.triangle_areas[0] == pytest.approx(0.5)
    np.testing.assert_allclose(mass.mass, 1 / 6, rtol=1e-14)
    assert not mass.pinned.any()


def test_pinned_vertex_has_zero_inverse_mass():
    mass, _ = build_sim_object(grid_swatch(3, 3), 1.0, pins=[0])
    assert mass.inv_mass[0] == 0.0 and mass.pinned[0]
    assert np.all(mass.inv_mass[1:] > 0)


def test_regular_tet_quarter_volume():
    s = 1 / np.sqrt(2)
    pts = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], float) * s / 2
    mesh = Mesh(pts, tetrahedra=[[0, 1, 2, 3]])
    assert mesh.tet_volumes()[0] == pytest.approx(np.sqrt(2) / 12)
    mass, _ = build_sim_object(mesh, 12 / np.sqrt(2))
    np.testing.assert_allclose(mass.mass, 0.25, rtol=1e-12)


@pytest.mark.parametrize("mesh,measure", [
    (grid_swatch(7, 5, 0.6, 0.4), 0.24),
    (tet_bar(3, 2, 2, size=(0.3, 0.2, 0.1)), 0.006),
])
def test_mass_lumping_conserves_total_mass(mesh, measure):
    mass, _ = build_sim_object(mesh, 2.5)
    assert mass.mass.sum() == pytest.approx(2.5 * measure, rel=1e-10)


def test_degenerate_and_orphan_meshes_are_rejected():
    with pytest.raises(MeshError):
        build_sim_object(Mesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]]), 1.0)
    with pytest.raises(MeshError):
        build_sim_object(Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], [[0, 1, 2]]), 1.0)
    with pytest.raises(ValueError):
        build_sim_object(grid_swatch(2, 2), 0.0)


def _unit(pinned=False):
    return MassModel(np.array([1.0]), np.array([0.0 if pinned else 1.0]), np.array([pinned]))


def test_predict_examples():
    x = predict_positions(SimState(np.zeros(3), np.zeros(3)), np.array([0, -10.0, 0]), _unit(),
                          SimConfig(dt=0.1))
    np.testing.assert_allclose(x, [0, -0.1, 0], atol=1e-15)
    x = predict_positions(SimState(np.zeros(3), np.array([1.0, 0, 0])), np.zeros(3), _unit(), SimConfig(dt=0.5))
    np.testing.assert_allclose(x, [0.5, 0, 0])
    x0 = np.array([0.3, 0.2, 0.1])
    x = predict_positions(SimState(x0, np.array([4.0, 4, 4])), np.array([1e3, 0, 0]), _unit(True), SimConfig())
    np.testing.assert_array_equal(x, x0)


def test_finalize_examples():
    np.testing.assert_array_equal(finalize_velocities(np.ones(3), np.ones(3), 0.1), 0.0)
    np.testing.assert_allclose(finalize_velocities(np.array([0.1, 0, 0]), np.zeros(3), 0.1), [1, 0, 0])
    with pytest.raises(FloatingPointError):
        finalize_velocities(np.array([np.nan, 0, 0]), np.zeros(3), 0.1)


def test_free_flight_matches_symplectic_euler():
    dt, N = 0.01, 25
    pts = np.array([[0.0, 1.0, 0.0], [1.0, 2.0, 3.0]])
    m = MassModel(np.ones(2), np.ones(2), np.zeros(2, dtype=bool))
    v0 = np.array([1.0, 2.0, -1.0, 0.5, 0.0, 0.25])
    sc = Scene(Mesh(pts), m, ConstraintSet.empty(), MaterialParams(), SimConfig(dt=dt), v0=v0, horizon=N)
    traj = simulate(sc, differentiable=False)
    g = np.tile([0.0, -9.81, 0.0], 2)
    x, v = pts.ravel().copy(), v0.copy()
    for _ in range(N):
        v = v + dt * g
        x = x + dt * v
    assert np.max(np.abs(traj.states[-1].x - x)) <= 1e-12
    assert np.max(np.abs(traj.states[-1].v - v)) <= 1e-10


def test_pinned_vertices_never_move():
    mesh = grid_swatch(4, 4, 0.3, 0.3)
    mass, _ = build_sim_object(mesh, 0.2, pins=[0, 3])
    from xpbdgrad.constraints import build_cloth_constraints
    sc = Scene(mesh, mass, build_cloth_constraints(mesh), MaterialParams(cloth=[[5, 4, 1, 1.75, 2e-4]]),
               SimConfig(), horizon=15)
    traj = simulate(sc, differentiable=False)
    for s in traj.states:
        np.testing.assert_array_equal(s.x.reshape(-1, 3)[[0, 3]], mesh.rest_positions[[0, 3]])
        np.testing.assert_array_equal(s.v.reshape(-1, 3)[[0, 3]], 0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dt=0.0)
    with pytest.raises(ValueError):
        SimConfig(constraint_iterations=0)
    with pytest.raises(ValueError):
        SimConfig(derivative_mode="magic")
    assert SimConfig(collision_thickness=0.01).margin == pytest.approx(0.02)


def test_swatch_topology():
    mesh = grid_swatch(21, 21)
    assert mesh.vertex_count == 441 and len(mesh.triangles) == 800
    # interior edges of a triangulated grid: all edges minus the boundary
    assert len(mesh.bend_stencils) == len(mesh.edges) - 4 * 20
