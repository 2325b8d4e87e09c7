"""Backward recursion over a stored trajectory and parameter-gradient accumulation.

Per step n the solve produced x_{n+1} = x~ + dx(x_{n+1}) with
x~ = x_n + dt v_n + dt^2 M^-1 f_n and v_{n+1} = (x_{n+1} - x_n) / dt.
Given the total adjoints (gx, gv) of x_{n+1} and v_{n+1}:

    (M - D_n) z_n = gx + gv / dt          (filtered CG, D_n = M d(dx)/dx)
    x_hat_n = M z_n                       adjoint of the predicted positions
    gx_n = dphi/dx_n + x_hat_n - gv / dt
    gv_n = dphi/dv_n + dt x_hat_n

Controls: dphi/df_n = dt^2 z_n, dphi/du += z_n^T P_n with P_n = M d(dx)/du.
Solving with the unscaled right-hand side and multiplying by M afterwards
keeps the recursion exact for non-uniform masses.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numba import njit

from . import kernels as K
from .derivative_engine import VerificationError, small_inverse

logger = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(msg)
        self.residual = residual


@dataclass
class CGInfo:
    iterations: int
    residual: float        # filtered residual relative to the filtered rhs
    seconds: float = 0.0


def _block_jacobi(A: sp.csr_matrix, keep: np.ndarray):
    n = A.shape[0]
    nb = n // 3
    d = np.zeros((nb, 3, 3))
    Ac = A.tocoo()
    same = (Ac.row // 3) == (Ac.col // 3)
    r, c, v = Ac.row[same], Ac.col[same], Ac.data[same]
    np.add.at(d, (r // 3, r % 3, c % 3), v)
    kb = keep.reshape(nb, 3)
    # filtered DOFs get an identity diagonal so the block stays invertible
    for a in range(3):
        off = ~kb[:, a]
        d[off, a, :] = 0.0
        d[off, :, a] = 0.0
        d[off, a, a] = 1.0
    try:
        inv = np.linalg.inv(d)
    except np.linalg.LinAlgError:
        diag = np.einsum("bii->bi", d)
        inv = np.zeros_like(d)
        idx = np.arange(3)
        inv[:, idx, idx] = 1.0 / np.where(np.abs(diag) > 0, diag, 1.0)
    return lambda r: np.einsum("bij,bj->bi", inv, r.reshape(nb, 3)).ravel()


def solve_filtered_cg(A, b, pinned=None, tol: float = 1e-8, max_iter: int | None = None,
                      full_output: bool = False):
    """Preconditioned CG with pinned DOFs filtered out of every iterate.

    ``pinned`` is a boolean mask per DOF or per vertex (length n/3).  The
    returned solution is exactly zero on pinned DOFs and satisfies
    ||S(b - A x)|| <= tol ||S b|| with S the filter.
    """
    t0 = time.perf_counter()
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float).ravel()
    n = len(b)
    if A.shape != (n, n):
        raise ValueError("matrix and right-hand side sizes differ")
    keep = np.ones(n, dtype=bool)
    if pinned is not None:
        pinned = np.asarray(pinned, dtype=bool).ravel()
        keep = ~(np.repeat(pinned, 3) if len(pinned) * 3 == n and len(pinned) != n else pinned)
    max_iter = 10 * n if max_iter is None else max_iter
    S = lambda v: np.where(keep, v, 0.0)  # noqa: E731
    precond = _block_jacobi(A, keep) if n % 3 == 0 else (lambda r: r)

    x = np.zeros(n)
    r = S(b)
    bnorm = np.linalg.norm(r)
    if bnorm == 0.0:
        info = CGInfo(0, 0.0, time.perf_counter() - t0)
        return (x, info) if full_output else x
    zv = S(precond(r))
    p = zv.copy()
    rz = r @ zv
    it = 0
    res = 1.0
    while it < max_iter:
        res = np.linalg.norm(r) / bnorm
        if res <= tol:
            # the recurrence drifts on stiff systems; confirm with the true residual and restart if needed
            r = S(b - A @ x)
            res = np.linalg.norm(r) / bnorm
            if res <= tol:
                break
            zv = S(precond(r))
            p = zv.copy()
            rz = r @ zv
        q = S(A @ p)
        pq = p @ q
        if pq <= 0:
            raise ConvergenceError(f"matrix not positive definite on the free subspace (p^T A p = {pq:.3e})", res)
        a = rz / pq
        x += a * p
        r -= a * q
        it += 1
        zv = S(precond(r))
        rz_new = r @ zv
        p = zv + (rz_new / rz) * p
        rz = rz_new
    res = np.linalg.norm(S(b - A @ x)) / bnorm
    if res > tol:
        raise ConvergenceError(f"CG did not converge in {max_iter} iterations (residual {res:.3e})", res)
    x[~keep] = 0.0
    info = CGInfo(it, float(res), time.perf_counter() - t0)
    return (x, info) if full_output else x


@njit(cache=True)
def reverse_sweeps(xbar, w, kinds, idx, prm, at, ucol, dat, iters, tape_x, tape_lam, tape_flag, ubar):
    """Vector-Jacobian product through every recorded projection, last visit first.

    ``xbar`` (V, 3) enters as the adjoint of the solved positions and leaves
    as the adjoint of the predicted positions.  Control adjoints are added
    into ``ubar``.
    """
    n = len(kinds)
    lbar = np.zeros((n, 3))
    for it in range(iters - 1, -1, -1):
        for j in range(n - 1, -1, -1):
            v = it * n + j
            flag = tape_flag[v]
            if flag == 0:
                continue
            kind = kinds[j]
            s = K.STENCIL_SIZE[kind]
            xl = tape_x[v]
            lp = tape_lam[v]
            ok, m, C, G, H = K.eval_local(kind, xl, prm[j], True)
            wl = np.zeros(12)
            xb = np.zeros(12)
            for a in range(s):
                wl[3 * a:3 * a + 3] = w[idx[j, a]]
                xb[3 * a:3 * a + 3] = xbar[idx[j, a]]
            Gm = np.ascontiguousarray(G[:m])
            GT = np.ascontiguousarray(Gm.T)
            atj = np.ascontiguousarray(at[j, :m, :m])
            J = (Gm * wl) @ GT + atj
            Jinv = small_inverse(J, m)
            dl = Jinv @ (-C[:m] - atj @ lp[:m])
            if flag == 2:
                dl[0] = -lp[0]
            wxb = wl * xb
            dlb = Gm @ wxb + lbar[j, :m]
            xadd = np.zeros(12)
            for r in range(m):
                xadd += dl[r] * (H[r] @ wxb)
            nu = 0
            while nu < 7 and ucol[j, nu] >= 0:
                nu += 1
            dC = np.zeros(7)
            dG = np.zeros((7, 12))
            if nu > 0 and (kind == K.COL_SPHERE or kind == K.COL_CAPSULE or kind == K.COL_PLANE):
                nu2, dC, dG = K.collider_param_derivatives(kind, xl, prm[j])
                for u in range(nu):
                    ubar[ucol[j, u]] += (wxb @ dG[u]) * dl[0]
            if flag == 2:
                # clamped: the new multiplier is zero whatever the inputs
                lbar[j, 0] = lbar[j, 0] - dlb[0]
            else:
                bb = np.ascontiguousarray(Jinv.T) @ dlb
                Jb = -np.outer(bb, dl)
                xadd -= GT @ bb
                for r in range(m):
                    for q in range(m):
                        c = Jb[r, q] + Jb[q, r]
                        if c != 0.0:
                            xadd += c * (H[r] @ (wl * Gm[q]))
                atb = Jb - np.outer(bb, lp[:m])
                for u in range(nu):
                    ubar[ucol[j, u]] += np.sum(atb * dat[j, u, :m, :m])
                    if m == 1:
                        ubar[ucol[j, u]] += -bb[0] * dC[u] + 2.0 * Jb[0, 0] * (dG[u] @ (wl * Gm[0]))
                lbar[j, :m] = lbar[j, :m] - np.ascontiguousarray(atj.T) @ bb
            for a in range(s):
                for c3 in range(3):
                    xbar[idx[j, a], c3] += xadd[3 * a + c3]


def unrolled_step(record, mass, g, n_controls: int):
    """Exact adjoint of one step: returns (adjoint of x~, control adjoint)."""
    from .forward_solver import gauss_seidel_taped
    rp = record.replay
    nt = len(rp["kinds"])
    iters = rp["iters"]
    V = len(mass.mass)
    tape_x = np.zeros((iters * nt, 4, 3))
    tape_lam = np.zeros((iters * nt, 3))
    tape_flag = np.zeros(iters * nt, dtype=np.int64)
    x = rp["x_tilde"].reshape(V, 3).copy()
    gauss_seidel_taped(x, mass.inv_mass, rp["kinds"], rp["idx"], rp["prm"], rp["at"], iters, tape_x, tape_lam,
                       tape_flag)
    xbar = np.asarray(g, dtype=float).reshape(V, 3).copy()
    ubar = np.zeros(max(n_controls, 1))
    reverse_sweeps(xbar, mass.inv_mass, rp["kinds"], rp["idx"], rp["prm"], rp["at"], rp["ucol"], rp["dat"], iters,
                   tape_x, tape_lam, tape_flag, ubar)
    return xbar.ravel(), ubar[:n_controls]


@dataclass
class AdjointState:
    n: int
    x_hat: np.ndarray      # adjoint of the predicted positions of step n
    z: np.ndarray          # M^-1 x_hat
    gx: np.ndarray         # total adjoint of x_n
    gv: np.ndarray         # total adjoint of v_n
    cg: CGInfo | None = None
    du: np.ndarray | None = None   # control adjoint of this step (unrolled mode)


def solve_direct(A, b, pinned=None):
    """Sparse LU solve restricted to the free DOFs; pinned entries are exactly 0."""
    t0 = time.perf_counter()
    b = np.asarray(b, dtype=float)
    keep = np.ones(len(b), dtype=bool) if pinned is None else ~np.repeat(np.asarray(pinned, dtype=bool), 3)
    A = sp.csr_matrix(A)
    Af = A[keep][:, keep].tocsc()
    bf = b[keep]
    x = np.zeros_like(b)
    if np.any(bf):
        x[keep] = spla.spsolve(Af, bf)
    nb = np.linalg.norm(bf)
    res = np.linalg.norm(bf - Af @ x[keep]) / nb if nb > 0 else 0.0
    if not np.isfinite(res):
        raise ConvergenceError("direct solve failed: singular matrix on the free subspace", res)
    return x, CGInfo(0, float(res), time.perf_counter() - t0)


def backward_step(record, mass, gx_next, gv_next, dphi_dx=None, dphi_dv=None, dt: float = None,
                  tol: float = 1e-8, max_iter: int | None = None, symmetry_tol: float = 1e-6,
                  n_controls: int = 0, solver: str = "cg") -> AdjointState:
    """One reverse step through the record of step n.

    ``solver`` is "cg", "direct" (sparse LU on the free DOFs) or "auto"
    (CG, falling back to LU when CG fails, e.g. on an indefinite unprojected system).
    """
    m = np.repeat(mass.mass, 3)
    n3 = len(m)
    g = np.asarray(gx_next, dtype=float) + np.asarray(gv_next, dtype=float) / dt
    if record.replay is not None:
        t0 = time.perf_counter()
        y, du = unrolled_step(record, mass, g, n_controls)
        pin = np.repeat(mass.pinned, 3)
        y[pin] = 0.0
        z = np.where(pin, 0.0, y / m)
        gx = y - np.asarray(gv_next) / dt + (0.0 if dphi_dx is None else dphi_dx)
        gv = dt * y + (0.0 if dphi_dv is None else dphi_dv)
        return AdjointState(record.step, y, z, gx, gv, CGInfo(0, 0.0, time.perf_counter() - t0), du)
    D = record.D if record.D is not None else sp.csr_matrix((n3, n3))
    if D.nnz:
        nd = sp.linalg.norm(D)
        asym = sp.linalg.norm(D - D.T) / nd if nd > 0 else 0.0
        if asym > symmetry_tol:
            raise VerificationError(f"step {record.step}: derivative matrix asymmetry {asym:.3e} exceeds {symmetry_tol}")
    A = sp.diags(m) - D
    if solver == "direct":
        z, info = solve_direct(A, g, mass.pinned)
    elif solver in ("cg", "auto"):
        try:
            z, info = solve_filtered_cg(A, g, mass.pinned, tol=tol, max_iter=max_iter, full_output=True)
        except ConvergenceError as e:
            if solver == "cg":
                raise
            logger.info("step %d: CG failed (%s), using direct solve", record.step, e)
            z, info = solve_direct(A, g, mass.pinned)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    y = m * z
    gx = y - np.asarray(gv_next) / dt
    gv = dt * y
    if dphi_dx is not None:
        gx = gx + dphi_dx
    if dphi_dv is not None:
        gv = gv + dphi_dv
    return AdjointState(record.step, y, z, gx, gv, info)


@dataclass
class AdjointResult:
    gradient: np.ndarray | None
    states: list
    dx0: np.ndarray
    dv0: np.ndarray
    cg: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def max_cg_residual(self) -> float:
        return max((c.residual for c in self.cg), default=0.0)


def backward_pass(trajectory, scene, goal_dx, goal_dv, family: str | None = None, tol: float = 1e-8,
                  max_iter: int | None = None, solver: str = "cg") -> AdjointResult:
    """Reverse sweep over all stored steps.

    ``goal_dx`` and ``goal_dv`` are (N+1, 3V) arrays of dphi/dx_n and
    dphi/dv_n.  Returns the gradient for ``family`` (without any explicit
    dphi/du term) and the adjoints of the initial state.
    """
    t0 = time.perf_counter()
    N = trajectory.horizon
    dt = scene.config.dt
    gx = np.array(goal_dx[N], dtype=float)
    gv = np.array(goal_dv[N], dtype=float)
    states = []
    cg = []
    for n in range(N - 1, -1, -1):
        rec = trajectory.record(n)
        st = backward_step(rec, scene.mass, gx, gv, goal_dx[n], goal_dv[n], dt, tol, max_iter,
                           n_controls=trajectory.n_controls, solver=solver)
        states.append(st)
        cg.append(st.cg)
        gx, gv = st.gx, st.gv
    states.reverse()
    cg.reverse()
    grad = accumulate_parameter_gradient(trajectory, states, scene, family, gx, gv) if family else None
    return AdjointResult(grad, states, gx, gv, cg, time.perf_counter() - t0)


def accumulate_parameter_gradient(trajectory, states, scene, family: str, dx0=None, dv0=None) -> np.ndarray:
    """Gradient of the goal with respect to one control family (dynamics part only)."""
    dt = scene.config.dt
    pinned = np.repeat(scene.mass.pinned, 3)
    if family in ("cloth", "solid", "collider"):
        g = np.zeros(scene.control_size(family))
        for st in states:
            if st.du is not None:
                g += st.du
                continue
            P = trajectory.record(st.n).P
            if P is None:
                raise ValueError(f"no control blocks stored for family {family!r}; "
                                 "simulate with the same control family")
            g += P.T @ st.z
        return g
    if family == "force_sequence":
        out = np.zeros((trajectory.horizon, scene.n3))
        for st in states:
            out[st.n] = dt * dt * np.where(pinned, 0.0, st.z)
        return out.ravel()
    if family == "initial_velocity":
        return np.asarray(dv0, dtype=float).copy()
    if family == "initial_position":
        # pinned vertices are not free initial values
        return np.where(pinned, 0.0, dx0)
    raise ValueError(f"unknown control family {family!r}")
