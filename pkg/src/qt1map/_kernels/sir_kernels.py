"""Two-pool selective inversion recovery kernels.

The longitudinal pair M = (Mf, Mm) relaxes as dM/dt = A (M - Meq) with
A = [[-(r1f+kfm), kmf], [kfm, -(r1m+kmf)]], kfm = kmf*psr, Meq = (1, psr).
Each inversion time is acquired in its own periodic steady state:
inversion (diag(sf, sm)) -> evolve ti -> read Mf -> saturate (Mf <- 0)
-> evolve td -> repeat. The per-repetition map is affine, so the steady
state is a 2x2 solve; evolution uses the closed-form 2x2 matrix
exponential (confluent form at an eigenvalue collision).

Everything here is scalar-loop code compiled by numba when the backend
allows it; the identical source runs as pure Python otherwise.
"""

import math

import numpy as np

from ..backend import maybe_jit

_jit = maybe_jit(default_numba=True)


def _expm2(a11, a12, a21, a22, t):
    """Entries of expm(t * [[a11, a12], [a21, a22]]) for real eigenvalues."""
    tr = a11 + a22
    det = a11 * a22 - a12 * a21
    disc = tr * tr - 4.0 * det
    if disc < 0.0:
        disc = 0.0
    sq = math.sqrt(disc)
    l1 = 0.5 * (tr + sq)
    l2 = 0.5 * (tr - sq)
    scale = abs(l1) + abs(l2)
    if sq <= 1e-12 * (scale + 1e-300):
        # confluent: e^{lt} (I + (A - l I) t)
        e = math.exp(l1 * t)
        return (
            e * (1.0 + (a11 - l1) * t),
            e * a12 * t,
            e * a21 * t,
            e * (1.0 + (a22 - l1) * t),
        )
    e1 = math.exp(l1 * t)
    e2 = math.exp(l2 * t)
    c1 = (e1 - e2) / (l1 - l2)
    c0 = e1 - c1 * l1
    return (c0 + c1 * a11, c1 * a12, c1 * a21, c0 + c1 * a22)


_expm2 = _jit(_expm2)
# Backend selection happens at import time (see qt1map.backend): every
# function in this chain is decorated in place, so under the numpy
# backend the same source runs uncompiled end to end.


def _sir_signal_fill(r1f, r1m, psr, kmf, sf, sm, m_inf, ti, td, out):
    kfm = kmf * psr
    a11 = -(r1f + kfm)
    a12 = kmf
    a21 = kfm
    a22 = -(r1m + kmf)
    meq_f = 1.0
    meq_m = psr
    td11, td12, td21, td22 = _expm2(a11, a12, a21, a22, td)
    qtd_f = meq_f - (td11 * meq_f + td12 * meq_m)
    qtd_m = meq_m - (td21 * meq_f + td22 * meq_m)
    for n in range(ti.shape[0]):
        t = ti[n]
        p11, p12, p21, p22 = _expm2(a11, a12, a21, a22, t)
        qti_f = meq_f - (p11 * meq_f + p12 * meq_m)
        qti_m = meq_m - (p21 * meq_f + p22 * meq_m)
        # per-repetition affine map M -> C M + d, composed right-to-left:
        # inversion D, evolve ti, saturate S=diag(0,1), evolve td
        # C = P_td S P_ti D
        sp21 = p21 * sf  # (S P_ti D) bottom row; top row is zero
        sp22 = p22 * sm
        c11 = td12 * sp21
        c12 = td12 * sp22
        c21 = td22 * sp21
        c22 = td22 * sp22
        d_f = td12 * qti_m + qtd_f
        d_m = td22 * qti_m + qtd_m
        # steady state: (I - C) M* = d
        i11 = 1.0 - c11
        i12 = -c12
        i21 = -c21
        i22 = 1.0 - c22
        det = i11 * i22 - i12 * i21
        if abs(det) < 1e-300:
            out[n] = np.nan
            continue
        ms_f = (i22 * d_f - i12 * d_m) / det
        ms_m = (i11 * d_m - i21 * d_f) / det
        # read Mf after inversion + ti evolution
        mf = p11 * (sf * ms_f) + p12 * (sm * ms_m) + qti_f
        out[n] = m_inf * mf
    return out


_sir_signal_fill = _jit(_sir_signal_fill)


def sir_signal_curve(r1f, r1m, psr, kmf, sf, sm, m_inf, ti, td) -> np.ndarray:
    """Steady-state free-pool signal at each inversion time."""
    ti = np.asarray(ti, dtype=np.float64)
    out = np.empty(ti.shape[0], dtype=np.float64)
    return _sir_signal_fill(
        float(r1f), float(r1m), float(psr), float(kmf),
        float(sf), float(sm), float(m_inf), ti, float(td), out,
    )


def _sir_signals_many(r1f, psr, kmf, sf, sm, m_inf, ti, td, out):
    for v in range(r1f.shape[0]):
        _sir_signal_fill(
            r1f[v], r1f[v], psr, kmf, sf[v], sm[v], m_inf, ti, td, out[v]
        )
    return out


_sir_signals_many = _jit(_sir_signals_many)


def sir_signals_batch(r1f, psr, kmf, sf, sm, m_inf, ti, td) -> np.ndarray:
    """Curves for many voxels sharing (psr, kmf, m_inf); r1f, sf, sm are
    per-voxel arrays (r1m tied to r1f). Returns (V, n_ti)."""
    r1f = np.asarray(r1f, dtype=np.float64)
    sf = np.broadcast_to(np.asarray(sf, dtype=np.float64), r1f.shape).copy()
    sm = np.broadcast_to(np.asarray(sm, dtype=np.float64), r1f.shape).copy()
    ti = np.asarray(ti, dtype=np.float64)
    out = np.empty((r1f.shape[0], ti.shape[0]), dtype=np.float64)
    return _sir_signals_many(r1f, float(psr), float(kmf), sf, sm, float(m_inf), ti, float(td), out)


# ---------------------------------------------------------------------------
# Damped least-squares fitting (Levenberg-Marquardt style).

_NP = 5  # r1f (r1m tied), psr, kmf, sf, m_inf


def _model(p, sm, ti, td, buf):
    return _sir_signal_fill(p[0], p[0], p[1], p[2], p[3], sm, p[4], ti, td, buf)


_model = _jit(_model)


def _cost(p, sm, ti, td, y, buf):
    _model(p, sm, ti, td, buf)
    c = 0.0
    for n in range(y.shape[0]):
        d = buf[n] - y[n]
        c += d * d
    return c


_cost = _jit(_cost)


def _solve_sym(a, b, x):
    """Gaussian elimination with partial pivoting; returns False when the
    system is numerically singular."""
    n = b.shape[0]
    m = np.empty((n, n + 1), dtype=np.float64)
    for i in range(n):
        for j in range(n):
            m[i, j] = a[i, j]
        m[i, n] = b[i]
    for col in range(n):
        piv = col
        best = abs(m[col, col])
        for r in range(col + 1, n):
            if abs(m[r, col]) > best:
                best = abs(m[r, col])
                piv = r
        if best < 1e-300:
            return False
        if piv != col:
            for j in range(n + 1):
                tmp = m[col, j]
                m[col, j] = m[piv, j]
                m[piv, j] = tmp
        inv = 1.0 / m[col, col]
        for r in range(col + 1, n):
            f = m[r, col] * inv
            if f != 0.0:
                for j in range(col, n + 1):
                    m[r, j] -= f * m[col, j]
    for i in range(n - 1, -1, -1):
        s = m[i, n]
        for j in range(i + 1, n):
            s -= m[i, j] * x[j]
        x[i] = s / m[i, i]
    return True


_solve_sym = _jit(_solve_sym)


def _fit_single(y, sm, ti, td, p0, lb, ub, max_iter, p_out):
    """LM with central-difference Jacobian and bound projection.

    Returns (cost, iterations, status); status 0 converged, 1 hit
    max_iter, 2 singular normal equations (after restarts, see driver).
    """
    nti = y.shape[0]
    p = np.empty(_NP, dtype=np.float64)
    for k in range(_NP):
        p[k] = min(max(p0[k], lb[k]), ub[k])
    buf = np.empty(nti, dtype=np.float64)
    fplus = np.empty(nti, dtype=np.float64)
    fminus = np.empty(nti, dtype=np.float64)
    jac = np.empty((nti, _NP), dtype=np.float64)
    jtj = np.empty((_NP, _NP), dtype=np.float64)
    jtr = np.empty(_NP, dtype=np.float64)
    delta = np.empty(_NP, dtype=np.float64)
    ptry = np.empty(_NP, dtype=np.float64)

    cost = _cost(p, sm, ti, td, y, buf)
    resid = buf - y
    lam = 1e-3
    it = 0
    status = 1
    while it < max_iter:
        it += 1
        for k in range(_NP):
            h = 1e-6 * max(abs(p[k]), 1.0)
            pk = p[k]
            p[k] = pk + h
            _model(p, sm, ti, td, fplus)
            p[k] = pk - h
            _model(p, sm, ti, td, fminus)
            p[k] = pk
            for n in range(nti):
                jac[n, k] = (fplus[n] - fminus[n]) / (2.0 * h)
        for a in range(_NP):
            jtr[a] = 0.0
            for n in range(nti):
                jtr[a] += jac[n, a] * resid[n]
            for b in range(_NP):
                s = 0.0
                for n in range(nti):
                    s += jac[n, a] * jac[n, b]
                jtj[a, b] = s
        accepted = False
        for _ in range(30):
            amat = jtj.copy()
            for a in range(_NP):
                d = jtj[a, a]
                if d <= 0.0:
                    d = 1e-12
                amat[a, a] = d * (1.0 + lam)
            if not _solve_sym(amat, -jtr, delta):
                status = 2
                return cost, it, status
            for k in range(_NP):
                ptry[k] = min(max(p[k] + delta[k], lb[k]), ub[k])
            newcost = _cost(ptry, sm, ti, td, y, buf)
            if newcost < cost:
                stepnorm = 0.0
                for k in range(_NP):
                    dd = ptry[k] - p[k]
                    stepnorm += dd * dd
                    p[k] = ptry[k]
                relchange = (cost - newcost) / max(cost, 1e-300)
                cost = newcost
                resid = (buf - y).copy()
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                if relchange < 1e-10 or math.sqrt(stepnorm) < 1e-12:
                    status = 0
                    it_final = it
                    for k in range(_NP):
                        p_out[k] = p[k]
                    return cost, it_final, status
                break
            lam *= 10.0
            if lam > 1e12:
                break
        if not accepted:
            # damping exhausted: local minimum within tolerance
            status = 0
            break
    for k in range(_NP):
        p_out[k] = p[k]
    return cost, it, status


_fit_single = _jit(_fit_single)


def _fit_many(Y, sm, ti, td, p0, lb, ub, max_iter, params, costs, iters, statuses):
    for v in range(Y.shape[0]):
        c, it, st = _fit_single(Y[v], sm[v], ti, td, p0, lb, ub, max_iter, params[v])
        if st == 2:
            # perturbed restarts when the normal equations go singular
            for attempt in range(3):
                ptry = p0.copy()
                for k in range(_NP):
                    ptry[k] = p0[k] * (1.0 + 0.05 * (attempt + 1)) + 1e-3 * (attempt + 1)
                    ptry[k] = min(max(ptry[k], lb[k]), ub[k])
                c, it, st = _fit_single(Y[v], sm[v], ti, td, ptry, lb, ub, max_iter, params[v])
                if st != 2:
                    break
        costs[v] = c
        iters[v] = it
        statuses[v] = st
    return params


_fit_many = _jit(_fit_many)


def sir_fit_batch(Y, sm, ti, td, p0, lb, ub, max_iter=500):
    """Fit every row of Y (V, n_ti); returns (params (V,5), cost, iters,
    status) with parameter order (r1f, psr, kmf, sf, m_inf)."""
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    V = Y.shape[0]
    sm = np.broadcast_to(np.asarray(sm, dtype=np.float64), (V,)).copy()
    ti = np.asarray(ti, dtype=np.float64)
    params = np.empty((V, _NP), dtype=np.float64)
    costs = np.empty(V, dtype=np.float64)
    iters = np.empty(V, dtype=np.int64)
    statuses = np.empty(V, dtype=np.int64)
    _fit_many(
        Y, sm, ti, float(td),
        np.asarray(p0, dtype=np.float64),
        np.asarray(lb, dtype=np.float64),
        np.asarray(ub, dtype=np.float64),
        max_iter, params, costs, iters, statuses,
    )
    return params, costs, iters, statuses
