"""Per-constraint kernels: value, gradient and gradient Jacobian.

Every kernel works on a padded local stencil ``xl`` of shape (4, 3) and a
parameter row ``prm``.  Outputs are padded to three rows and twelve local
coordinates so one Gauss-Seidel loop can dispatch over all families.
"""

import numpy as np
from numba import njit

DISTANCE = 0
MEMBRANE = 1
BEND = 2
TET_HYDRO = 3
TET_DEV = 4
COL_SPHERE = 5
COL_CAPSULE = 6
COL_PLANE = 7
COL_VERTEX_TRI = 8
COL_STATIC_TRI = 9

KIND_NAMES = ("distance", "membrane", "bend", "tet_hydrostatic", "tet_deviatoric", "collision_sphere",
              "collision_capsule", "collision_plane", "collision_vertex_triangle", "collision_static_triangle")

N_PARAMS = 9
EPS_DEGENERATE = 1e-12

STENCIL_SIZE = np.array([2, 3, 4, 4, 4, 1, 1, 1, 4, 1], dtype=np.int64)
ROW_COUNT = np.array([1, 3, 1, 1, 1, 1, 1, 1, 1, 1], dtype=np.int64)
# number of collider parameters owned by the analytic collision kinds
COLLIDER_NPARAM = np.array([0, 0, 0, 0, 0, 4, 7, 1, 0, 0], dtype=np.int64)


@njit(cache=True)
def is_collision(kind):
    return kind >= COL_SPHERE


@njit(cache=True)
def _skew(a):
    s = np.zeros((3, 3))
    s[0, 1] = -a[2]
    s[0, 2] = a[1]
    s[1, 0] = a[2]
    s[1, 2] = -a[0]
    s[2, 0] = -a[1]
    s[2, 1] = a[0]
    return s


@njit(cache=True)
def _distance(xl, prm, C, G, H, need_h):
    d0 = xl[0, 0] - xl[1, 0]
    d1 = xl[0, 1] - xl[1, 1]
    d2 = xl[0, 2] - xl[1, 2]
    ln = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    if ln < EPS_DEGENERATE:
        return False
    C[0] = ln - prm[0]
    G[0, 0] = d0 / ln
    G[0, 1] = d1 / ln
    G[0, 2] = d2 / ln
    for k in range(3):
        G[0, 3 + k] = -G[0, k]
    if need_h:
        n = G[0, 0:3].copy()
        for a in range(3):
            for b in range(3):
                v = ((1.0 if a == b else 0.0) - n[a] * n[b]) / ln
                H[0, a, b] = v
                H[0, 3 + a, 3 + b] = v
                H[0, a, 3 + b] = -v
                H[0, 3 + a, b] = -v
    return True


@njit(cache=True)
def _membrane(xl, prm, C, G, H, need_h):
    bu1, bv1, bu2, bv2 = prm[0], prm[1], prm[2], prm[3]
    bu0 = -bu1 - bu2
    bv0 = -bv1 - bv2
    fu0 = bu0 * xl[0, 0] + bu1 * xl[1, 0] + bu2 * xl[2, 0]
    fu1 = bu0 * xl[0, 1] + bu1 * xl[1, 1] + bu2 * xl[2, 1]
    fu2 = bu0 * xl[0, 2] + bu1 * xl[1, 2] + bu2 * xl[2, 2]
    fv0 = bv0 * xl[0, 0] + bv1 * xl[1, 0] + bv2 * xl[2, 0]
    fv1 = bv0 * xl[0, 1] + bv1 * xl[1, 1] + bv2 * xl[2, 1]
    fv2 = bv0 * xl[0, 2] + bv1 * xl[1, 2] + bv2 * xl[2, 2]
    C[0] = 0.5 * (fu0 * fu0 + fu1 * fu1 + fu2 * fu2 - 1.0)
    C[1] = 0.5 * (fv0 * fv0 + fv1 * fv1 + fv2 * fv2 - 1.0)
    C[2] = fu0 * fv0 + fu1 * fv1 + fu2 * fv2
    for i in range(3):
        bu = bu0 if i == 0 else (bu1 if i == 1 else bu2)
        bv = bv0 if i == 0 else (bv1 if i == 1 else bv2)
        G[0, 3 * i] = bu * fu0
        G[0, 3 * i + 1] = bu * fu1
        G[0, 3 * i + 2] = bu * fu2
        G[1, 3 * i] = bv * fv0
        G[1, 3 * i + 1] = bv * fv1
        G[1, 3 * i + 2] = bv * fv2
        G[2, 3 * i] = bu * fv0 + bv * fu0
        G[2, 3 * i + 1] = bu * fv1 + bv * fu1
        G[2, 3 * i + 2] = bu * fv2 + bv * fu2
    if need_h:
        bu = np.array([bu0, bu1, bu2])
        bv = np.array([bv0, bv1, bv2])
        for i in range(3):
            for j in range(3):
                cuu = bu[i] * bu[j]
                cvv = bv[i] * bv[j]
                cuv = bu[i] * bv[j] + bv[i] * bu[j]
                for k in range(3):
                    H[0, 3 * i + k, 3 * j + k] = cuu
                    H[1, 3 * i + k, 3 * j + k] = cvv
                    H[2, 3 * i + k, 3 * j + k] = cuv
    return True


@njit(cache=True)
def _dihedral(xl, need_h, G, H):
    """Signed dihedral angle of the hinge (a, b | c, d) plus derivatives.

    Uses theta = atan2(y, x) with x = (e x m).(k x e) and
    y = -|e| (e x m).k, where e = b - a, m = c - a, k = d - a.  Derivatives
    are taken in (e, m, k) space and mapped back to the four vertices.
    """
    e0, e1, e2 = xl[1, 0] - xl[0, 0], xl[1, 1] - xl[0, 1], xl[1, 2] - xl[0, 2]
    m0, m1, m2 = xl[2, 0] - xl[0, 0], xl[2, 1] - xl[0, 1], xl[2, 2] - xl[0, 2]
    k0, k1, k2 = xl[3, 0] - xl[0, 0], xl[3, 1] - xl[0, 1], xl[3, 2] - xl[0, 2]
    ee = e0 * e0 + e1 * e1 + e2 * e2
    em = e0 * m0 + e1 * m1 + e2 * m2
    ek = e0 * k0 + e1 * k1 + e2 * k2
    mk = m0 * k0 + m1 * k1 + m2 * k2
    ln = np.sqrt(ee)
    if ln < EPS_DEGENERATE:
        return False, 0.0
    xv = ek * em - ee * mk
    # cross products m x k, k x e, e x m
    mk0, mk1, mk2 = m1 * k2 - m2 * k1, m2 * k0 - m0 * k2, m0 * k1 - m1 * k0
    ke0, ke1, ke2 = k1 * e2 - k2 * e1, k2 * e0 - k0 * e2, k0 * e1 - k1 * e0
    em0, em1, em2 = e1 * m2 - e2 * m1, e2 * m0 - e0 * m2, e0 * m1 - e1 * m0
    t = em0 * k0 + em1 * k1 + em2 * k2
    yv = -ln * t
    r2 = xv * xv + yv * yv
    if r2 < EPS_DEGENERATE * EPS_DEGENERATE:
        return False, 0.0
    theta = np.arctan2(yv, xv)

    # gradient in the 9-dim (e, m, k) space, then mapped to the four vertices
    ev = (e0, e1, e2)
    mv = (m0, m1, m2)
    kv = (k0, k1, k2)
    gtv = ((mk0, mk1, mk2), (ke0, ke1, ke2), (em0, em1, em2))
    for q in range(3):
        gxe = kv[q] * em + mv[q] * ek - 2.0 * ev[q] * mk
        gxm = ev[q] * ek - kv[q] * ee
        gxk = ev[q] * em - mv[q] * ee
        gye = -(t * ev[q] / ln + ln * gtv[0][q])
        gym = -ln * gtv[1][q]
        gyk = -ln * gtv[2][q]
        ge = (xv * gye - yv * gxe) / r2
        gm = (xv * gym - yv * gxm) / r2
        gk = (xv * gyk - yv * gxk) / r2
        G[0, q] = -(ge + gm + gk)
        G[0, 3 + q] = ge
        G[0, 6 + q] = gm
        G[0, 9 + q] = gk

    if need_h:
        e = np.array([e0, e1, e2])
        m = np.array([m0, m1, m2])
        k = np.array([k0, k1, k2])
        gx = np.empty(9)
        gx[0:3] = k * em + m * ek - 2.0 * e * mk
        gx[3:6] = e * ek - k * ee
        gx[6:9] = e * em - m * ee
        gt = np.empty(9)
        gt[0:3] = np.cross(m, k)
        gt[3:6] = np.cross(k, e)
        gt[6:9] = np.cross(e, m)
        gl = np.zeros(9)
        gl[0:3] = e / ln
        gy = -(t * gl + ln * gt)
        T = np.zeros((9, 12))
        for c in range(3):
            for q in range(3):
                T[3 * c + q, q] = -1.0
                T[3 * c + q, 3 * (c + 1) + q] = 1.0
        I3 = np.eye(3)
        Hx = np.zeros((9, 9))
        Hx[0:3, 0:3] = np.outer(k, m) + np.outer(m, k) - 2.0 * mk * I3
        Hx[0:3, 3:6] = np.outer(k, e) + ek * I3 - 2.0 * np.outer(e, k)
        Hx[0:3, 6:9] = em * I3 + np.outer(m, e) - 2.0 * np.outer(e, m)
        Hx[3:6, 6:9] = np.outer(e, e) - ee * I3
        Hx[3:6, 0:3] = Hx[0:3, 3:6].T
        Hx[6:9, 0:3] = Hx[0:3, 6:9].T
        Hx[6:9, 3:6] = Hx[3:6, 6:9].T
        Ht = np.zeros((9, 9))
        Ht[0:3, 3:6] = -_skew(k)
        Ht[0:3, 6:9] = _skew(m)
        Ht[3:6, 6:9] = -_skew(e)
        Ht[3:6, 0:3] = Ht[0:3, 3:6].T
        Ht[6:9, 0:3] = Ht[0:3, 6:9].T
        Ht[6:9, 3:6] = Ht[3:6, 6:9].T
        Hl = np.zeros((9, 9))
        ehat = e / ln
        Hl[0:3, 0:3] = (I3 - np.outer(ehat, ehat)) / ln
        Hy = -(np.outer(gl, gt) + np.outer(gt, gl) + t * Hl + ln * Ht)
        num = xv * gy - yv * gx
        dr2 = 2.0 * xv * gx + 2.0 * yv * gy
        Hn = (xv * Hy - yv * Hx + np.outer(gy, gx) - np.outer(gx, gy)) / r2 - np.outer(num, dr2) / (r2 * r2)
        Hn = 0.5 * (Hn + Hn.T)
        H[0, :, :] = np.ascontiguousarray(T.T) @ Hn @ T
    return True, theta


@njit(cache=True)
def _bend(xl, prm, C, G, H, need_h):
    ok, theta = _dihedral(xl, need_h, G, H)
    if not ok:
        return False
    C[0] = theta - prm[0]
    return True


@njit(cache=True)
def _tet_columns(xl, prm):
    beta = np.empty((4, 3))
    for i in range(3):
        for c in range(3):
            beta[i + 1, c] = prm[3 * i + c]
    for c in range(3):
        beta[0, c] = -beta[1, c] - beta[2, c] - beta[3, c]
    F = np.zeros((3, 3))  # F[:, c] is column c
    for i in range(4):
        for c in range(3):
            F[:, c] += beta[i, c] * xl[i]
    return beta, F


@njit(cache=True)
def _tet_hydro(xl, prm, C, G, H, need_h):
    beta, F = _tet_columns(xl, prm)
    f0 = F[:, 0].copy()
    f1 = F[:, 1].copy()
    f2 = F[:, 2].copy()
    P = np.empty((3, 3))
    P[:, 0] = np.cross(f1, f2)
    P[:, 1] = np.cross(f2, f0)
    P[:, 2] = np.cross(f0, f1)
    C[0] = f0[0] * P[0, 0] + f0[1] * P[1, 0] + f0[2] * P[2, 0] - 1.0
    for i in range(4):
        g = np.zeros(3)
        for c in range(3):
            g += beta[i, c] * P[:, c]
        G[0, 3 * i:3 * i + 3] = g
    if need_h:
        Hd = np.zeros((3, 3, 3, 3))  # Hd[a, b] = d2 det / df_a df_b
        Hd[0, 1] = -_skew(f2)
        Hd[0, 2] = _skew(f1)
        Hd[1, 2] = -_skew(f0)
        Hd[1, 0] = Hd[0, 1].T
        Hd[2, 0] = Hd[0, 2].T
        Hd[2, 1] = Hd[1, 2].T
        for i in range(4):
            for j in range(4):
                blk = np.zeros((3, 3))
                for a in range(3):
                    for b in range(3):
                        if a != b:
                            blk += beta[i, a] * beta[j, b] * Hd[a, b]
                H[0, 3 * i:3 * i + 3, 3 * j:3 * j + 3] = blk
    return True


@njit(cache=True)
def _tet_dev(xl, prm, C, G, H, need_h):
    beta, F = _tet_columns(xl, prm)
    nrm = np.sqrt(np.sum(F * F))
    if nrm < EPS_DEGENERATE:
        return False
    C[0] = nrm
    for i in range(4):
        g = np.zeros(3)
        for c in range(3):
            g += beta[i, c] * F[:, c]
        G[0, 3 * i:3 * i + 3] = g / nrm
    if need_h:
        for i in range(4):
            for j in range(4):
                s = beta[i, 0] * beta[j, 0] + beta[i, 1] * beta[j, 1] + beta[i, 2] * beta[j, 2]
                for a in range(3):
                    for b in range(3):
                        v = -G[0, 3 * i + a] * G[0, 3 * j + b] / nrm
                        if a == b:
                            v += s / nrm
                        H[0, 3 * i + a, 3 * j + b] = v
    return True


@njit(cache=True)
def _capsule_closest(x, p, q):
    """Closest point parameter t on segment pq (clamped) and region code."""
    u = q - p
    uu = u @ u
    t = ((x - p) @ u) / uu
    if t <= 0.0:
        return 0.0, 0
    if t >= 1.0:
        return 1.0, 2
    return t, 1


@njit(cache=True)
def _point_gap(xv, s, C, G, H, need_h, offset):
    d = xv - s
    ln = np.sqrt(d @ d)
    if ln < EPS_DEGENERATE:
        return False
    n = d / ln
    C[0] = ln - offset
    G[0, 0:3] = n
    if need_h:
        H[0, 0:3, 0:3] = (np.eye(3) - np.outer(n, n)) / ln
    return True


@njit(cache=True)
def _col_sphere(xl, prm, C, G, H, need_h):
    return _point_gap(xl[0], prm[0:3], C, G, H, need_h, prm[3] + prm[4])


@njit(cache=True)
def _col_capsule(xl, prm, C, G, H, need_h):
    p = prm[0:3]
    q = prm[3:6]
    t, region = _capsule_closest(xl[0], p, q)
    s = p + t * (q - p)
    ok = _point_gap(xl[0], s, C, G, H, need_h, prm[6] + prm[7])
    if ok and need_h and region == 1:
        L = np.sqrt((q - p) @ (q - p))
        uh = (q - p) / L
        n = G[0, 0:3].copy()
        ln = C[0] + prm[6] + prm[7]
        Q = np.eye(3) - np.outer(uh, uh)
        H[0, 0:3, 0:3] = (Q - np.outer(n, n)) / ln
    return ok


@njit(cache=True)
def _col_plane(xl, prm, C, G, H, need_h):
    n = prm[0:3]
    C[0] = n @ xl[0] - prm[3] - prm[4]
    G[0, 0:3] = n
    return True


@njit(cache=True)
def _col_vertex_tri(xl, prm, C, G, H, need_h):
    n = prm[0:3]
    w = prm[3] * xl[1] + prm[4] * xl[2] + prm[5] * xl[3]
    C[0] = n @ (xl[0] - w) - prm[6]
    G[0, 0:3] = n
    for i in range(3):
        G[0, 3 * (i + 1):3 * (i + 2)] = -prm[3 + i] * n
    return True


@njit(cache=True)
def _col_static_tri(xl, prm, C, G, H, need_h):
    n = prm[0:3]
    C[0] = n @ (xl[0] - prm[3:6]) - prm[6]
    G[0, 0:3] = n
    return True


@njit(cache=True)
def eval_local(kind, xl, prm, need_h):
    """Evaluate constraint ``kind`` on the padded stencil.

    Returns ``(ok, m, C, G, H)``; ``ok`` is False for a degenerate element.
    """
    C = np.zeros(3)
    G = np.zeros((3, 12))
    # curvature storage only when asked for; callers never touch H otherwise
    H = np.zeros((3, 12, 12)) if need_h else np.zeros((0, 12, 12))
    ok, m = eval_into(kind, xl, prm, need_h, C, G, H)
    return ok, m, C, G, H


@njit(cache=True)
def eval_into(kind, xl, prm, need_h, C, G, H):
    """Same as :func:`eval_local` writing into caller buffers; returns (ok, m)."""
    C[:] = 0.0
    G[:] = 0.0
    if need_h:
        H[:] = 0.0
    m = ROW_COUNT[kind]
    if kind == DISTANCE:
        ok = _distance(xl, prm, C, G, H, need_h)
    elif kind == MEMBRANE:
        ok = _membrane(xl, prm, C, G, H, need_h)
    elif kind == BEND:
        ok = _bend(xl, prm, C, G, H, need_h)
    elif kind == TET_HYDRO:
        ok = _tet_hydro(xl, prm, C, G, H, need_h)
    elif kind == TET_DEV:
        ok = _tet_dev(xl, prm, C, G, H, need_h)
    elif kind == COL_SPHERE:
        ok = _col_sphere(xl, prm, C, G, H, need_h)
    elif kind == COL_CAPSULE:
        ok = _col_capsule(xl, prm, C, G, H, need_h)
    elif kind == COL_PLANE:
        ok = _col_plane(xl, prm, C, G, H, need_h)
    elif kind == COL_VERTEX_TRI:
        ok = _col_vertex_tri(xl, prm, C, G, H, need_h)
    else:
        ok = _col_static_tri(xl, prm, C, G, H, need_h)
    return ok, m


@njit(cache=True)
def collider_param_derivatives(kind, xl, prm):
    """Derivatives of a collision constraint w.r.t. its collider parameters.

    Returns ``(nu, dC, dG)`` with dC of shape (7,) and dG of shape (7, 12);
    only the first ``nu`` entries are meaningful.  Parameter layouts:
    sphere (cx, cy, cz, r), capsule (p, q, r), plane (offset,).
    """
    dC = np.zeros(7)
    dG = np.zeros((7, 12))
    nu = COLLIDER_NPARAM[kind]
    x = xl[0]
    I3 = np.eye(3)
    if kind == COL_SPHERE:
        d = x - prm[0:3]
        ln = np.sqrt(d @ d)
        if ln < EPS_DEGENERATE:
            return 0, dC, dG
        n = d / ln
        P = (I3 - np.outer(n, n)) / ln
        for k in range(3):
            dC[k] = -n[k]
            dG[k, 0:3] = -P[:, k]
        dC[3] = -1.0
    elif kind == COL_CAPSULE:
        p = prm[0:3]
        q = prm[3:6]
        t, region = _capsule_closest(x, p, q)
        s = p + t * (q - p)
        d = x - s
        ln = np.sqrt(d @ d)
        if ln < EPS_DEGENERATE:
            return 0, dC, dG
        n = d / ln
        Pn = (I3 - np.outer(n, n)) / ln
        for k in range(3):
            dC[k] = -(1.0 - t) * n[k]
            dC[3 + k] = -t * n[k]
        dC[6] = -1.0
        if region == 0:
            for k in range(3):
                dG[k, 0:3] = -Pn[:, k]
        elif region == 2:
            for k in range(3):
                dG[3 + k, 0:3] = -Pn[:, k]
        else:
            L = np.sqrt((q - p) @ (q - p))
            uh = (q - p) / L
            Q = I3 - np.outer(uh, uh)
            r = x - p
            tau = r @ uh
            w = r - tau * uh
            A = (np.outer(uh, w) + tau * Q) / L
            dwdp = -Q + A
            dwdq = -A
            dndp = Pn @ dwdp
            dndq = Pn @ dwdq
            for k in range(3):
                dG[k, 0:3] = dndp[:, k]
                dG[3 + k, 0:3] = dndq[:, k]
    elif kind == COL_PLANE:
        dC[0] = -1.0
    return nu, dC, dG
