"""Compliant constraint families, their compliances and compliance derivatives."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels as K
from .core_model import Mesh, MeshError

# cloth parameter layout per material: (C00, C11, C01, C22, b)
CLOTH_PARAMS = ("C00", "C11", "C01", "C22", "b")
# solid parameter layout per material: (a, b) with mu = a^2, lambda = b^2
SOLID_PARAMS = ("a", "b")


@dataclass
class MaterialParams:
    cloth: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))
    solid: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        self.cloth = np.asarray(self.cloth, dtype=float).reshape(-1, 5)
        self.solid = np.asarray(self.solid, dtype=float).reshape(-1, 2)

    def copy(self) -> "MaterialParams":
        return MaterialParams(self.cloth.copy(), self.solid.copy())

    def check(self):
        for m, g in enumerate(self.cloth):
            k = membrane_stiffness_matrix(g)
            if np.linalg.eigvalsh(k).min() <= 0:
                raise ValueError(f"cloth material {m}: membrane coefficients not positive definite")
            if g[4] <= 0:
                raise ValueError(f"cloth material {m}: bending stiffness must be positive")
        for m, (a, b) in enumerate(self.solid):
            if a == 0 or b == 0:
                raise ValueError(f"solid material {m}: Lame parameters must be strictly positive")


def membrane_stiffness_matrix(g) -> np.ndarray:
    c00, c11, c01, c22 = g[0], g[1], g[2], g[3]
    return np.array([[c00, c01, 0.0], [c01, c11, 0.0], [0.0, 0.0, c22]])


# d(stiffness matrix)/d(C00, C11, C01, C22)
_MEMBRANE_DK = np.zeros((4, 3, 3))
_MEMBRANE_DK[0, 0, 0] = 1.0
_MEMBRANE_DK[1, 1, 1] = 1.0
_MEMBRANE_DK[2, 0, 1] = _MEMBRANE_DK[2, 1, 0] = 1.0
_MEMBRANE_DK[3, 2, 2] = 1.0


@dataclass(frozen=True)
class Constraint:
    """One constraint: kind code, stencil vertices and kernel parameters.

    ``measure`` is the rest area (membrane) or rest volume (tet);
    ``material`` indexes :class:`MaterialParams`; ``alpha`` is a fixed
    compliance for families not driven by material parameters.
    """

    kind: int
    stencil: tuple
    params: np.ndarray
    material: int = 0
    measure: float = 0.0
    alpha: float = 0.0

    @property
    def rows(self) -> int:
        return int(K.ROW_COUNT[self.kind])


def _local(c: Constraint, x: np.ndarray) -> np.ndarray:
    p = np.asarray(x, dtype=float).reshape(-1, 3)
    xl = np.zeros((4, 3))
    xl[:len(c.stencil)] = p[list(c.stencil)]
    return xl


def _prm(c: Constraint) -> np.ndarray:
    prm = np.zeros(K.N_PARAMS)
    prm[:len(c.params)] = c.params
    return prm


class DegenerateConstraint(ArithmeticError):
    pass


def _eval(c, x, need_h):
    ok, m, C, G, H = K.eval_local(c.kind, _local(c, x), _prm(c), need_h)
    if not ok:
        raise DegenerateConstraint(f"degenerate configuration for constraint kind {c.kind} on {c.stencil}")
    return m, C, G, H


def eval_constraint(c: Constraint, x: np.ndarray) -> np.ndarray:
    m, C, _, _ = _eval(c, x, False)
    return C[:m].copy()


def eval_gradient(c: Constraint, x: np.ndarray) -> sp.csr_matrix:
    """Constraint gradient as an (rows x 3V) sparse matrix."""
    m, _, G, _ = _eval(c, x, False)
    n = len(np.asarray(x).ravel())
    s = len(c.stencil)
    cols = (3 * np.asarray(c.stencil)[:, None] + np.arange(3)).ravel()
    rows = np.repeat(np.arange(m), 3 * s)
    return sp.csr_matrix((G[:m, :3 * s].ravel(), (rows, np.tile(cols, m))), shape=(m, n))


def eval_gradient_jacobian(c: Constraint, x: np.ndarray) -> np.ndarray:
    """Per-row second derivative blocks over the stencil, shape (rows, 3s, 3s)."""
    m, _, _, H = _eval(c, x, True)
    s = 3 * len(c.stencil)
    return H[:m, :s, :s].copy()


def compliance_of(c: Constraint, params: MaterialParams, dt: float, collision_compliance: float = 1e-8):
    """Return (alpha, alpha_tilde) as (rows x rows) matrices."""
    if c.kind == K.MEMBRANE:
        kmat = c.measure * membrane_stiffness_matrix(params.cloth[c.material])
        try:
            alpha = np.linalg.inv(kmat)
        except np.linalg.LinAlgError:
            raise ValueError(f"cloth material {c.material}: singular inverse-compliance block") from None
    elif c.kind == K.BEND:
        alpha = np.array([[1.0 / params.cloth[c.material, 4]]])
    elif c.kind == K.TET_HYDRO:
        lam = params.solid[c.material, 1] ** 2
        alpha = np.array([[1.0 / (lam * c.measure)]])
    elif c.kind == K.TET_DEV:
        mu = params.solid[c.material, 0] ** 2
        alpha = np.array([[1.0 / (mu * c.measure)]])
    elif K.is_collision(c.kind):
        alpha = np.array([[collision_compliance]])
    else:
        alpha = np.array([[c.alpha]])
    return alpha, alpha / dt**2


def compliance_param_derivative(c: Constraint, params: MaterialParams, dt: float):
    """d(alpha_tilde)/d(owned parameters).

    Returns ``(names, dat)`` where ``names`` lists (family, material, param)
    and ``dat`` has shape (len(names), rows, rows).
    """
    if c.kind == K.MEMBRANE:
        alpha, _ = compliance_of(c, params, dt)
        dat = np.array([-alpha @ (c.measure * dk) @ alpha for dk in _MEMBRANE_DK]) / dt**2
        return [("cloth", c.material, p) for p in CLOTH_PARAMS[:4]], dat
    if c.kind == K.BEND:
        b = params.cloth[c.material, 4]
        return [("cloth", c.material, "b")], np.array([[[-1.0 / (b * b * dt * dt)]]])
    if c.kind == K.TET_HYDRO:
        b = params.solid[c.material, 1]
        return [("solid", c.material, "b")], np.array([[[-2.0 / (b**3 * c.measure * dt * dt)]]])
    if c.kind == K.TET_DEV:
        a = params.solid[c.material, 0]
        return [("solid", c.material, "a")], np.array([[[-2.0 / (a**3 * c.measure * dt * dt)]]])
    return [], np.zeros((0, c.rows, c.rows))


class ConstraintSet:
    """Structure-of-arrays container for the elastic constraints of one object.

    Rows are kept in solve order: distance, membrane, bend, then each
    tetrahedron's hydrostatic row followed by its deviatoric row.
    """

    def __init__(self, kinds, idx, prm, material, measure, alpha):
        self.kinds = np.ascontiguousarray(kinds, dtype=np.int64)
        self.idx = np.ascontiguousarray(idx, dtype=np.int64).reshape(-1, 4)
        self.prm = np.ascontiguousarray(prm, dtype=np.float64).reshape(-1, K.N_PARAMS)
        self.material = np.ascontiguousarray(material, dtype=np.int64)
        self.measure = np.ascontiguousarray(measure, dtype=np.float64)
        self.alpha = np.ascontiguousarray(alpha, dtype=np.float64)

    def __len__(self):
        return len(self.kinds)

    def count(self, kind: int) -> int:
        return int(np.sum(self.kinds == kind))

    def constraint(self, j: int) -> Constraint:
        s = int(K.STENCIL_SIZE[self.kinds[j]])
        return Constraint(int(self.kinds[j]), tuple(int(i) for i in self.idx[j, :s]), self.prm[j].copy(),
                          int(self.material[j]), float(self.measure[j]), float(self.alpha[j]))

    def __iter__(self):
        return (self.constraint(j) for j in range(len(self)))

    @classmethod
    def empty(cls):
        return cls(np.zeros(0), np.zeros((0, 4)), np.zeros((0, K.N_PARAMS)), np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def concat(cls, sets):
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty()
        return cls(*(np.concatenate([getattr(s, a) for s in sets])
                     for a in ("kinds", "idx", "prm", "material", "measure", "alpha")))

    def compliance_tilde(self, params: MaterialParams, dt: float) -> np.ndarray:
        """alpha / dt^2 for every row, shape (n, 3, 3)."""
        n = len(self)
        at = np.zeros((n, 3, 3))
        k = self.kinds
        mem = np.nonzero(k == K.MEMBRANE)[0]
        if len(mem):
            kmat = np.array([membrane_stiffness_matrix(g) for g in params.cloth])
            blocks = self.measure[mem, None, None] * kmat[self.material[mem]]
            at[mem] = np.linalg.inv(blocks) / dt**2
        sel = np.nonzero(k == K.BEND)[0]
        at[sel, 0, 0] = 1.0 / params.cloth[self.material[sel], 4] / dt**2
        sel = np.nonzero(k == K.TET_HYDRO)[0]
        at[sel, 0, 0] = 1.0 / (params.solid[self.material[sel], 1] ** 2 * self.measure[sel]) / dt**2
        sel = np.nonzero(k == K.TET_DEV)[0]
        at[sel, 0, 0] = 1.0 / (params.solid[self.material[sel], 0] ** 2 * self.measure[sel]) / dt**2
        sel = np.nonzero(k == K.DISTANCE)[0]
        at[sel, 0, 0] = self.alpha[sel] / dt**2
        return at

    def control_map(self, family: str, params: MaterialParams, dt: float):
        """Per-row local control columns and d(alpha_tilde)/du blocks.

        Returns ``(ucol, dat)`` with shapes (n, 7) and (n, 7, 3, 3); unused
        slots carry column -1.
        """
        n = len(self)
        ucol = -np.ones((n, 7), dtype=np.int64)
        dat = np.zeros((n, 7, 3, 3))
        k = self.kinds
        at = self.compliance_tilde(params, dt)
        if family == "cloth":
            mem = np.nonzero(k == K.MEMBRANE)[0]
            for q in range(4):
                ucol[mem, q] = 5 * self.material[mem] + q
                dk = self.measure[mem, None, None] * _MEMBRANE_DK[q] * dt**2
                # d(at) = -at d(at^-1) at, with at^-1 = dt^2 A K
                dat[mem, q] = -np.einsum("nij,njk,nkl->nil", at[mem], dk, at[mem])
            sel = np.nonzero(k == K.BEND)[0]
            ucol[sel, 0] = 5 * self.material[sel] + 4
            b = params.cloth[self.material[sel], 4]
            dat[sel, 0, 0, 0] = -1.0 / (b * b * dt * dt)
        elif family == "solid":
            sel = np.nonzero(k == K.TET_HYDRO)[0]
            ucol[sel, 0] = 2 * self.material[sel] + 1
            b = params.solid[self.material[sel], 1]
            dat[sel, 0, 0, 0] = -2.0 / (b**3 * self.measure[sel] * dt * dt)
            sel = np.nonzero(k == K.TET_DEV)[0]
            ucol[sel, 0] = 2 * self.material[sel]
            a = params.solid[self.material[sel], 0]
            dat[sel, 0, 0, 0] = -2.0 / (a**3 * self.measure[sel] * dt * dt)
        return ucol, dat


def _material_frames(mesh: Mesh, warp):
    """Rest 2D coordinates of every triangle in its (warp, weft) frame."""
    X = mesh.rest_positions
    t = mesh.triangles
    if mesh.uv is not None:
        uv = mesh.uv
        return np.stack([uv[t[:, 1]] - uv[t[:, 0]], uv[t[:, 2]] - uv[t[:, 0]]], axis=2)
    e1 = X[t[:, 1]] - X[t[:, 0]]
    e2 = X[t[:, 2]] - X[t[:, 0]]
    n = np.cross(e1, e2)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    w = np.asarray(warp, dtype=float)
    u = w - (n @ w)[:, None] * n
    nu = np.linalg.norm(u, axis=1, keepdims=True)
    bad = nu[:, 0] < 1e-8
    if np.any(bad):
        alt = np.array([0.0, 1.0, 0.0]) if abs(w[1]) < 0.9 else np.array([0.0, 0.0, 1.0])
        u[bad] = alt - (n[bad] @ alt)[:, None] * n[bad]
        nu = np.linalg.norm(u, axis=1, keepdims=True)
    u /= nu
    v = np.cross(n, u)
    Dm = np.empty((len(t), 2, 2))
    Dm[:, 0, 0] = np.einsum("ij,ij->i", e1, u)
    Dm[:, 1, 0] = np.einsum("ij,ij->i", e1, v)
    Dm[:, 0, 1] = np.einsum("ij,ij->i", e2, u)
    Dm[:, 1, 1] = np.einsum("ij,ij->i", e2, v)
    return Dm


def build_cloth_constraints(mesh: Mesh, materials=None, warp=(1.0, 0.0, 0.0), bending=True) -> ConstraintSet:
    """Membrane rows per triangle plus one dihedral bend row per interior edge.

    ``materials`` gives a material id per triangle (default all 0); a hinge
    takes the material of its first triangle.
    """
    T = len(mesh.triangles)
    mat = np.zeros(T, dtype=np.int64) if materials is None else np.asarray(materials, dtype=np.int64)
    Dm = _material_frames(mesh, warp)
    det = Dm[:, 0, 0] * Dm[:, 1, 1] - Dm[:, 0, 1] * Dm[:, 1, 0]
    bad = np.nonzero(np.abs(det) < 1e-14)[0]
    if len(bad):
        raise MeshError(f"triangle {int(bad[0])} has zero rest area")
    Dinv = np.linalg.inv(Dm)
    prm = np.zeros((T, K.N_PARAMS))
    prm[:, 0:2] = Dinv[:, 0, :]
    prm[:, 2:4] = Dinv[:, 1, :]
    idx = np.zeros((T, 4), dtype=np.int64)
    idx[:, :3] = mesh.triangles
    sets = [ConstraintSet(np.full(T, K.MEMBRANE), idx, prm, mat, 0.5 * np.abs(det), np.zeros(T))]
    if bending:
        st = mesh.bend_stencils
        if len(st):
            tri_of = {}
            for t, tri in enumerate(mesh.triangles):
                for k in range(3):
                    a, b = int(tri[k]), int(tri[(k + 1) % 3])
                    tri_of.setdefault((min(a, b), max(a, b)), t)
            bmat = np.array([mat[tri_of[(min(a, b), max(a, b))]] for a, b, _, _ in st], dtype=np.int64)
            bprm = np.zeros((len(st), K.N_PARAMS))
            for h, s in enumerate(st):
                ok, _, C, _, _ = K.eval_local(K.BEND, mesh.rest_positions[s].copy(), np.zeros(K.N_PARAMS), False)
                if not ok:
                    raise MeshError(f"hinge {h} is degenerate at rest")
                bprm[h, 0] = C[0]
            sets.append(ConstraintSet(np.full(len(st), K.BEND), st, bprm, bmat, np.zeros(len(st)), np.zeros(len(st))))
    return ConstraintSet.concat(sets)


def build_solid_constraints(mesh: Mesh, materials=None) -> ConstraintSet:
    """Hydrostatic and deviatoric rows per tetrahedron, interleaved."""
    E = len(mesh.tetrahedra)
    mat = np.zeros(E, dtype=np.int64) if materials is None else np.asarray(materials, dtype=np.int64)
    X = mesh.rest_positions
    t = mesh.tetrahedra
    Dm = np.stack([X[t[:, k]] - X[t[:, 0]] for k in (1, 2, 3)], axis=2)
    det = np.linalg.det(Dm)
    bad = np.nonzero(np.abs(det) < 1e-18)[0]
    if len(bad):
        raise MeshError(f"tetrahedron {int(bad[0])} has zero rest volume")
    Dinv = np.linalg.inv(Dm)
    prm = Dinv.reshape(E, 9)
    kinds = np.empty(2 * E, dtype=np.int64)
    kinds[0::2] = K.TET_HYDRO
    kinds[1::2] = K.TET_DEV
    return ConstraintSet(kinds, np.repeat(t, 2, axis=0), np.repeat(prm, 2, axis=0), np.repeat(mat, 2),
                         np.repeat(np.abs(det) / 6.0, 2), np.zeros(2 * E))


def build_distance_constraints(mesh: Mesh, compliance: float = 0.0, edges=None) -> ConstraintSet:
    e = mesh.edges if edges is None else np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    n = len(e)
    idx = np.zeros((n, 4), dtype=np.int64)
    idx[:, :2] = e
    prm = np.zeros((n, K.N_PARAMS))
    prm[:, 0] = np.linalg.norm(mesh.rest_positions[e[:, 0]] - mesh.rest_positions[e[:, 1]], axis=1)
    return ConstraintSet(np.full(n, K.DISTANCE), idx, prm, np.zeros(n), np.zeros(n), np.full(n, float(compliance)))
