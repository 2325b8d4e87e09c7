"""Position-update derivative blocks, control blocks, PD projection and assembly.

A block for constraint j is the dense (3s x 3s) matrix M d(dx_j)/dx over
its stencil.  Two ways of producing it are provided:

* iterative accumulation, run inside every Gauss-Seidel visit of the
  constraint with running sums of d(dlambda)/dx over the step;
* the closed form at the end of the step, obtained from the fixed point
  C + alpha_tilde lambda = 0: sum_r lambda_r H_r - G^T alpha_tilde^-1 G.

Both converge to the same block as the solve converges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from numba import njit

from . import kernels as K


class VerificationError(AssertionError):
    pass


@njit(cache=True)
def det3(A):
    return (A[0, 0] * (A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
            - A[0, 1] * (A[1, 0] * A[2, 2] - A[1, 2] * A[2, 0])
            + A[0, 2] * (A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]))


@njit(cache=True)
def small_inverse(J, m):
    """Inverse of the leading m x m block (m = 1 or 3) by cofactors."""
    if m == 1:
        out = np.zeros((1, 1))
        out[0, 0] = 1.0 / J[0, 0]
        return out
    if m != 3:
        return np.ascontiguousarray(np.linalg.inv(np.ascontiguousarray(J[:m, :m])))
    out = np.empty((3, 3))
    out[0, 0] = J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1]
    out[0, 1] = J[0, 2] * J[2, 1] - J[0, 1] * J[2, 2]
    out[0, 2] = J[0, 1] * J[1, 2] - J[0, 2] * J[1, 1]
    out[1, 0] = J[1, 2] * J[2, 0] - J[1, 0] * J[2, 2]
    out[1, 1] = J[0, 0] * J[2, 2] - J[0, 2] * J[2, 0]
    out[1, 2] = J[0, 2] * J[1, 0] - J[0, 0] * J[1, 2]
    out[2, 0] = J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0]
    out[2, 1] = J[0, 1] * J[2, 0] - J[0, 0] * J[2, 1]
    out[2, 2] = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
    d = J[0, 0] * out[0, 0] + J[0, 1] * out[1, 0] + J[0, 2] * out[2, 0]
    return out / d


@njit(cache=True)
def accumulate_position_derivative(m, G, H, wl, dl, Jinv, at, S, block, clamped):
    """One Gauss-Seidel visit's contribution to the position-derivative block.

    ``S`` holds the running sum of d(dlambda)/dx over earlier visits in this
    step and is updated in place; ``block`` receives
    sum_r dl_r H_r + G^T d(dlambda)/dx.  Returns d(dlambda)/dx.
    """
    GT = np.ascontiguousarray(G[:m].T)
    a = np.ascontiguousarray(at[:m, :m])
    Hs = np.zeros((12, 12))
    for r in range(m):
        Hs += dl[r] * H[r]
    if clamped:
        dd = -S[:m].copy()
    else:
        dx = wl * (GT @ dl)
        dJ = np.zeros((m, 12))
        for r in range(m):
            dJ[r] = dx @ H[r] + (G[r] * wl) @ Hs
        db = -G[:m] - a @ S[:m]
        dd = Jinv @ (db - dJ)
    block += Hs + GT @ dd
    S[:m] += dd
    return dd


@njit(cache=True)
def accumulate_control_derivative(m, nu, G, wl, dl, lam_prev, Jinv, at, dat, dC, dG, T, pblk, clamped):
    """Per-visit contribution to M d(dx_j)/du for ``nu`` local controls.

    Compliance controls enter through ``dat`` = d(alpha_tilde)/du; collider
    controls through ``dC`` and ``dG`` (single-row constraints only).
    ``T`` is the running sum of d(dlambda)/du over earlier visits.
    """
    GT = np.ascontiguousarray(G[:m].T)
    a = np.ascontiguousarray(at[:m, :m])
    for u in range(nu):
        du = np.ascontiguousarray(dat[u, :m, :m])
        tu = np.ascontiguousarray(T[:m, u])
        if clamped:
            ddu = -tu
        else:
            dJu = du @ dl
            if m == 1:
                dJu[0] += 2.0 * ((dG[u] * wl) @ G[0]) * dl[0]
            dbu = -du @ lam_prev[:m] - a @ tu
            if m == 1:
                dbu[0] -= dC[u]
            ddu = Jinv @ (dbu - dJu)
        if m == 1:
            pblk[:, u] += dG[u] * dl[0]
        pblk[:, u] += GT @ ddu
        T[:m, u] += ddu


@njit(cache=True)
def _floored_compliance(at, G, wl, m):
    a = at[:m, :m].copy()
    for r in range(m):
        if a[r, r] <= 0.0:
            # hard row: stand in a compliance far below the row's mass term
            a[r, r] = 1e-9 * max((G[r] * wl) @ G[r], 1e-300)
    return a


@njit(cache=True)
def converged_blocks(x, w, kinds, idx, prm, at, lam, ucol, dat, blocks, pblk, active):
    """Closed-form blocks at the end-of-step iterate for every constraint."""
    n = len(kinds)
    for j in range(n):
        kind = kinds[j]
        s = K.STENCIL_SIZE[kind]
        if K.is_collision(kind) and lam[j, 0] <= 0.0:
            continue
        xl = np.zeros((4, 3))
        wl = np.zeros(12)
        for a in range(s):
            xl[a] = x[idx[j, a]]
            wl[3 * a:3 * a + 3] = w[idx[j, a]]
        ok, m, C, G, H = K.eval_local(kind, xl, prm[j], True)
        if not ok:
            continue
        a = _floored_compliance(at[j], G, wl, m)
        ainv = small_inverse(a, m)
        GT = np.ascontiguousarray(G[:m].T)
        blk = -GT @ (ainv @ G[:m])
        for r in range(m):
            blk += lam[j, r] * H[r]
        blocks[j] = blk
        active[j] = True
        nu = 0
        while nu < 7 and ucol[j, nu] >= 0:
            nu += 1
        if nu == 0:
            continue
        dC = np.zeros(7)
        dG = np.zeros((7, 12))
        if kind == K.COL_SPHERE or kind == K.COL_CAPSULE or kind == K.COL_PLANE:
            nu2, dC, dG = K.collider_param_derivatives(kind, xl, prm[j])
        for u in range(nu):
            # fixed point: dC/du + d(at)/du lambda + at dlambda/du = 0
            rhs = -np.ascontiguousarray(dat[j, u, :m, :m]) @ lam[j, :m]
            rhs[0] -= dC[u]
            dlam = ainv @ rhs
            col = GT @ dlam
            if m == 1:
                col += dG[u] * lam[j, 0]
            pblk[j, :, u] = col


@njit(cache=True)
def project_psd_inplace(Bm):
    vals, vecs = np.linalg.eigh(Bm)
    for i in range(len(vals)):
        if vals[i] < 0.0:
            vals[i] = 0.0
    return (vecs * vals) @ vecs.T


@njit(cache=True)
def project_blocks(kinds, blocks, active):
    """Clamp the elastic-Hessian blocks (-block) to positive semi-definite."""
    for j in range(len(kinds)):
        if not active[j]:
            continue
        n3 = 3 * K.STENCIL_SIZE[kinds[j]]
        Hm = -0.5 * (blocks[j, :n3, :n3] + blocks[j, :n3, :n3].T)
        blocks[j, :n3, :n3] = -project_psd_inplace(Hm)


def project_positive_definite(block: np.ndarray) -> np.ndarray:
    """Symmetrize and clamp negative eigenvalues to zero."""
    b = np.asarray(block, dtype=float)
    b = 0.5 * (b + b.T)
    vals, vecs = np.linalg.eigh(b)
    return (vecs * np.maximum(vals, 0.0)) @ vecs.T


@dataclass
class VerificationReport:
    max_asymmetry: float
    max_row_sum: float
    worst_kind: int
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_asymmetry <= self.tolerance and self.max_row_sum <= self.tolerance


def block_metrics(block: np.ndarray, s: int) -> tuple[float, float]:
    """Relative asymmetry and relative stencil row-sum norm of one block."""
    b = block[:3 * s, :3 * s]
    scale = max(np.linalg.norm(b), 1e-300)
    asym = np.linalg.norm(b - b.T) / scale
    rows = b.reshape(3 * s, s, 3).sum(axis=1)
    return float(asym), float(np.linalg.norm(rows) / scale)


def verify_derivative_blocks(blocks, kinds, active=None, tol: float = 1e-6, raise_on_fail: bool = False):
    """Symmetry and translation-invariance check over elastic blocks.

    Collision rows against external colliders are not translation invariant
    and are skipped.
    """
    worst = (0.0, 0.0, -1)
    for j, kind in enumerate(kinds):
        if K.is_collision(kind) and kind != K.COL_VERTEX_TRI:
            continue
        if active is not None and not active[j]:
            continue
        s = int(K.STENCIL_SIZE[kind])
        a, r = block_metrics(blocks[j], s)
        if max(a, r) > max(worst[0], worst[1]):
            worst = (a, r, int(kind))
        else:
            worst = (max(worst[0], a), max(worst[1], r), worst[2])
    rep = VerificationReport(worst[0], worst[1], worst[2], tol)
    if raise_on_fail and not rep.ok:
        raise VerificationError(
            f"derivative blocks of constraint kind {rep.worst_kind} fail verification: "
            f"asymmetry {rep.max_asymmetry:.3e}, row sum {rep.max_row_sum:.3e}")
    return rep


def assemble_sparse(blocks, idx, kinds, n_vertices: int, active=None, free=None) -> sp.csr_matrix:
    """Sum per-stencil dense blocks into a (3V x 3V) CSR matrix.

    ``free`` is an optional boolean mask per vertex; rows and columns of
    vertices outside it are dropped.
    """
    rows, cols, vals = [], [], []
    kinds = np.asarray(kinds)
    sel = np.ones(len(kinds), dtype=bool) if active is None else np.asarray(active, dtype=bool)
    for s in np.unique(K.STENCIL_SIZE[kinds]) if len(kinds) else []:
        js = np.nonzero(sel & (K.STENCIL_SIZE[kinds] == s))[0]
        if len(js) == 0:
            continue
        st = idx[js, :s]
        if st.min() < 0 or st.max() >= n_vertices:
            raise IndexError("block index out of range")
        dof = (3 * st[:, :, None] + np.arange(3)).reshape(len(js), 3 * s)
        rows.append(np.repeat(dof, 3 * s, axis=1).ravel())
        cols.append(np.tile(dof, (1, 3 * s)).ravel())
        vals.append(blocks[js, :3 * s, :3 * s].reshape(len(js), -1).ravel())
    n = 3 * n_vertices
    if not rows:
        return sp.csr_matrix((n, n))
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    v = np.concatenate(vals)
    if free is not None:
        fd = np.repeat(np.asarray(free, dtype=bool), 3)
        keep = fd[r] & fd[c]
        r, c, v = r[keep], c[keep], v[keep]
    return sp.coo_matrix((v, (r, c)), shape=(n, n)).tocsr()


def assemble_control_blocks(pblk, idx, kinds, ucol, n_vertices: int, n_controls: int, free=None) -> sp.csr_matrix:
    """Sum local control blocks into a (3V x n_controls) CSR matrix."""
    has = ucol[:, 0] >= 0
    if not np.any(has) or n_controls == 0:
        return sp.csr_matrix((3 * n_vertices, n_controls))
    rows, cols, vals = [], [], []
    fd = None if free is None else np.repeat(np.asarray(free, dtype=bool), 3)
    ssz = K.STENCIL_SIZE[np.asarray(kinds)]
    nus = np.sum(ucol >= 0, axis=1)
    for s, nu in set(zip(ssz[has].tolist(), nus[has].tolist())):
        js = np.nonzero(has & (ssz == s) & (nus == nu))[0]
        dof = (3 * idx[js, :s, None] + np.arange(3)).reshape(len(js), 3 * s)
        rows.append(np.repeat(dof, nu, axis=1).ravel())
        cols.append(np.tile(ucol[js, :nu], (1, 3 * s)).ravel())
        vals.append(pblk[js, :3 * s, :nu].reshape(len(js), -1).ravel())
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    v = np.concatenate(vals)
    if fd is not None:
        keep = fd[r]
        r, c, v = r[keep], c[keep], v[keep]
    return sp.coo_matrix((v, (r, c)), shape=(3 * n_vertices, n_controls)).tocsr()
