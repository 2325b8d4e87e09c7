import numpy as np
import pytest

from xpbdgrad import kernels as K
from xpbdgrad.collision import (Capsule, HalfSpace, Sphere, TriangleMeshCollider, collider_parameter_jacobian,
                                detect_proximities, make_collision_constraints)
from xpbdgrad.constraints import ConstraintSet, eval_constraint
from xpbdgrad.core_model import SimConfig
from xpbdgrad.forward_solver import simulate, solve_constraint_iteration
from xpbdgrad.inverse_opt import ControlVector, KeyframeL2, compute_gradient, finite_difference_oracle
from xpbdgrad.presets import particle_scene, swatch_scene

SPHERE = Sphere(np.zeros(3), 1.0)


def _above(d):
    return np.array([[0.0, 1.0 + d, 0.0]])


def test_detection_examples():
    hits = detect_proximities(_above(0.005), [SPHERE], margin=0.01)
    assert len(hits) == 1 and hits[0].gap == pytest.approx(0.005)
    assert detect_proximities(_above(0.02), [SPHERE], margin=0.01) == []
    on = detect_proximities(np.array([[0.6, 0.8, 0.0]]), [SPHERE], margin=0.01)
    assert on[0].gap == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(on[0].normal, [0.6, 0.8, 0.0])


def _row(x, h):
    prox = detect_proximities(x, [SPHERE], h=h, margin=1.0)
    return make_collision_constraints(prox, h, 0.0, [SPHERE])[0]


def test_constraint_value_examples():
    x = _above(0.005)
    assert eval_constraint(_row(x, 0.01), x.ravel())[0] == pytest.approx(-0.005)
    x = _above(0.02)
    c = _row(x, 0.01)
    assert eval_constraint(c, x.ravel())[0] == pytest.approx(0.01)
    cs = ConstraintSet([c.kind], [[0, 0, 0, 0]], [np.pad(c.params, (0, K.N_PARAMS - len(c.params)))], [0], [0], [0])
    x1, lam, _ = solve_constraint_iteration(x.ravel(), np.zeros((1, 3)), cs, np.ones(1), np.zeros((1, 3, 3)))
    np.testing.assert_array_equal(x1, x.ravel())
    assert lam[0, 0] == 0.0


def test_single_projection_reaches_thickness():
    x = _above(0.002)
    c = _row(x, 0.01)
    cs = ConstraintSet([c.kind], [[0, 0, 0, 0]], [np.pad(c.params, (0, K.N_PARAMS - len(c.params)))], [0], [0], [0])
    x1, lam, _ = solve_constraint_iteration(x.ravel(), np.zeros((1, 3)), cs, np.ones(1), np.zeros((1, 3, 3)))
    assert np.linalg.norm(x1) - 1.0 == pytest.approx(0.01, abs=1e-14)
    assert lam[0, 0] > 0


def test_sphere_witness_jacobian():
    prox = detect_proximities(np.array([[0.3, 1.05, -0.2]]), [SPHERE], margin=0.5)[0]
    Jw = collider_parameter_jacobian(SPHERE, prox)
    np.testing.assert_allclose(Jw[:, :3], np.eye(3))
    np.testing.assert_allclose(Jw[:, 3], prox.normal)
    h = 1e-6
    up = detect_proximities(np.array([[0.3, 1.05, -0.2]]), [SPHERE.with_params([0, 0, 0, 1 + h])], margin=0.5)[0]
    dn = detect_proximities(np.array([[0.3, 1.05, -0.2]]), [SPHERE.with_params([0, 0, 0, 1 - h])], margin=0.5)[0]
    np.testing.assert_allclose((up.witness - dn.witness) / (2 * h), Jw[:, 3], atol=1e-8)


@pytest.mark.parametrize("col", [Capsule([0, 0, 0], [1, 0, 0], 0.3), HalfSpace([0, 1, 0], -0.1)])
def test_witness_jacobian_fd(col):
    x = np.array([[0.4, 0.32, 0.05]])
    prox = detect_proximities(x, [col], margin=2.0)[0]
    Jw = collider_parameter_jacobian(col, prox)
    for k in range(col.nparam):
        e = np.zeros(col.nparam)
        e[k] = 1e-6
        up = detect_proximities(x, [col.with_params(col.params + e)], margin=2.0)[0]
        dn = detect_proximities(x, [col.with_params(col.params - e)], margin=2.0)[0]
        # the frozen normal ignores rotation of the contact direction; compare along the normal
        fd = (up.witness - dn.witness) / 2e-6
        assert prox.normal @ fd == pytest.approx(prox.normal @ Jw[:, k], abs=1e-7)


def test_static_mesh_and_self_proximities():
    tri = TriangleMeshCollider([[0, 0, 0], [1, 0, 0], [0, 0, 1]], [[0, 1, 2]])
    hits = detect_proximities(np.array([[0.2, 0.003, 0.2], [0.2, 0.5, 0.2]]), [tri], margin=0.01)
    assert [q.vertex for q in hits] == [0]
    np.testing.assert_allclose(hits[0].witness, [0.2, 0, 0.2])
    sc = swatch_scene(4, 0.3, pins="none")
    folded = sc.x0.reshape(-1, 3).copy()
    folded[-4:, 1] = 0.004
    folded[-4:, 2] = 0.05
    hits = detect_proximities(folded, [], sc.mesh, h=0.005, self_collision=True)
    assert hits and all(q.collider == -1 for q in hits)
    assert all(q.vertex not in q.triangle_vertices for q in hits)


def test_detection_is_deterministic():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 1, (200, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    x *= 1 + rng.uniform(-0.02, 0.02, (200, 1))
    cols = [SPHERE, HalfSpace([0, 1, 0], 0.5)]
    a = detect_proximities(x, cols, h=0.01, margin=0.03)
    b = detect_proximities(x.copy(), cols, h=0.01, margin=0.03)
    assert [(q.vertex, q.collider, q.gap) for q in a] == [(q.vertex, q.collider, q.gap) for q in b]
    assert [q.sort_key for q in a] == sorted(q.sort_key for q in a)


def test_rigid_collisions_never_deepen_penetration():
    cfg = SimConfig(dt=0.01, collision_thickness=0.005, collision_compliance=0.0)
    sph = Sphere([0.15, -0.12, 0.15], 0.12)
    sc = swatch_scene(6, 0.3, horizon=25, pins="none", config=cfg, colliders=[sph])
    traj = simulate(sc, differentiable=False)
    for n in range(traj.horizon):
        before = np.minimum(sph.gaps(traj.states[n].x.reshape(-1, 3))[0] - 0.005, 0.0)
        after = np.minimum(sph.gaps(traj.states[n + 1].x.reshape(-1, 3))[0] - 0.005, 0.0)
        assert np.all(after >= np.minimum(before, 0.0) - 1e-12)
    assert max(traj.record(n).n_collisions for n in range(traj.horizon)) > 0


def test_sphere_parameter_gradient_through_contact():
    sph = Sphere([0.0, -0.2, 0.0], 0.2)
    cfg = SimConfig(dt=0.01, collision_thickness=0.01)
    sc = particle_scene(2, 1.0, x0=(0.05, 0.0, 0.0), v0=(0.0, -0.3, 0.0), config=cfg).with_(colliders=[sph])
    assert simulate(sc, differentiable=False).record(0).n_collisions == 1
    goal = KeyframeL2([2], [[0.1, 0.05, 0.02]])
    cv = ControlVector.from_scene(sc, "collider")
    _, grad, _, _ = compute_gradient(sc, cv, goal)
    for i in range(4):
        fd = finite_difference_oracle(sc, cv, goal, i)
        assert abs(grad[i] - fd) <= 0.05 * max(abs(fd), 1e-3 * np.abs(grad).max())
