"""Steady-state MP2RAGE/MP3RAGE signal kernels.

Longitudinal magnetization through one inversion period is an affine
map mz -> A*mz + B composed from inversion, free relaxation, and
per-pulse GRE block steps; the periodic steady state is B/(1-A) in
closed form. Block runs of m identical pulse steps with coefficient
c = cos(b1*alpha)*exp(-tr/T1) collapse to (c**m, (1-E_tr)*(1-c**m)/(1-c)).

Two flavors: a scalar loop (numba target) and a vectorized numpy path.
Both return one amplitude per GRE block, sin(b1*alpha)*mz at the block
center pulse (index n//2).
"""

import math

import numpy as np

from ..backend import maybe_jit, numba_enabled


def _block_affine(c, etr, m):
    if abs(1.0 - c) < 1e-14:
        return 1.0, m * (1.0 - etr)
    cm = c**m
    return cm, (1.0 - etr) * (1.0 - cm) / (1.0 - c)


def _gre_signals_loop(t1, b1, ti, flips, n_pulses, tr, seq_tr, inv_eff, out):
    nb = flips.shape[0]
    h = n_pulses // 2
    ta = ti[0] - 0.5 * n_pulses * tr
    td = seq_tr - ti[nb - 1] - 0.5 * n_pulses * tr
    for i in range(t1.shape[0]):
        T1 = t1[i]
        B1 = b1[i]
        r = 1.0 / T1
        etr = math.exp(-tr * r)
        # pass 1: affine map of one full period, starting just before inversion
        A = -inv_eff
        B = 0.0
        e = math.exp(-ta * r)
        A = e * A
        B = e * B + (1.0 - e)
        for k in range(nb):
            if k > 0:
                gap = ti[k] - ti[k - 1] - n_pulses * tr
                e = math.exp(-gap * r)
                A = e * A
                B = e * B + (1.0 - e)
            c = math.cos(B1 * flips[k]) * etr
            if abs(1.0 - c) < 1e-14:
                ab, bb = 1.0, n_pulses * (1.0 - etr)
            else:
                cm = c**n_pulses
                ab, bb = cm, (1.0 - etr) * (1.0 - cm) / (1.0 - c)
            A = ab * A
            B = ab * B + bb
        e = math.exp(-td * r)
        A = e * A
        B = e * B + (1.0 - e)
        if abs(A) >= 1.0:
            for k in range(nb):
                out[i, k] = np.nan
            continue
        mz = B / (1.0 - A)
        # pass 2: propagate the steady state and read block centers
        mz = -inv_eff * mz
        e = math.exp(-ta * r)
        mz = e * mz + (1.0 - e)
        for k in range(nb):
            if k > 0:
                gap = ti[k] - ti[k - 1] - n_pulses * tr
                e = math.exp(-gap * r)
                mz = e * mz + (1.0 - e)
            c = math.cos(B1 * flips[k]) * etr
            if abs(1.0 - c) < 1e-14:
                ah, bh = 1.0, h * (1.0 - etr)
                arr, brr = 1.0, (n_pulses - h) * (1.0 - etr)
            else:
                ch = c**h
                ah, bh = ch, (1.0 - etr) * (1.0 - ch) / (1.0 - c)
                cr = c ** (n_pulses - h)
                arr, brr = cr, (1.0 - etr) * (1.0 - cr) / (1.0 - c)
            mzc = ah * mz + bh
            out[i, k] = math.sin(B1 * flips[k]) * mzc
            mz = arr * mzc + brr
    return out


_gre_signals_jit = maybe_jit(default_numba=True)(_gre_signals_loop)


def _gre_signals_numpy(t1, b1, ti, flips, n_pulses, tr, seq_tr, inv_eff, out):
    nb = flips.shape[0]
    h = n_pulses // 2
    ta = ti[0] - 0.5 * n_pulses * tr
    td = seq_tr - ti[nb - 1] - 0.5 * n_pulses * tr
    r = 1.0 / t1
    etr = np.exp(-tr * r)

    def relax(t):
        e = np.exp(-t * r)
        return e, 1.0 - e

    def block(k, m):
        c = np.cos(b1 * flips[k]) * etr
        near1 = np.abs(1.0 - c) < 1e-14
        csafe = np.where(near1, 0.5, c)
        cm = csafe**m
        a = np.where(near1, 1.0, cm)
        b = np.where(near1, m * (1.0 - etr), (1.0 - etr) * (1.0 - cm) / (1.0 - csafe))
        return a, b

    A = np.full_like(t1, -inv_eff)
    B = np.zeros_like(t1)
    e, q = relax(ta)
    A, B = e * A, e * B + q
    for k in range(nb):
        if k > 0:
            e, q = relax(ti[k] - ti[k - 1] - n_pulses * tr)
            A, B = e * A, e * B + q
        ab, bb = block(k, n_pulses)
        A, B = ab * A, ab * B + bb
    e, q = relax(td)
    A, B = e * A, e * B + q
    bad = np.abs(A) >= 1.0
    mz = B / np.where(bad, np.nan, 1.0 - A)

    mz = -inv_eff * mz
    e, q = relax(ta)
    mz = e * mz + q
    for k in range(nb):
        if k > 0:
            e, q = relax(ti[k] - ti[k - 1] - n_pulses * tr)
            mz = e * mz + q
        ah, bh = block(k, h)
        arr, brr = block(k, n_pulses - h)
        mzc = ah * mz + bh
        out[:, k] = np.sin(b1 * flips[k]) * mzc
        mz = arr * mzc + brr
    return out


def gre_signals_batch(t1, b1, ti, flips_rad, n_pulses, tr, seq_tr, inv_eff):
    """Per-block GRE amplitudes for arrays of (t1, b1).

    t1 and b1 are broadcast to a common 1D shape; returns shape
    (len, n_blocks) float64. Degenerate periods (|A| >= 1) yield NaN.
    """
    t1 = np.atleast_1d(np.asarray(t1, dtype=np.float64))
    b1 = np.broadcast_to(np.asarray(b1, dtype=np.float64), t1.shape).copy()
    ti = np.asarray(ti, dtype=np.float64)
    flips = np.asarray(flips_rad, dtype=np.float64)
    out = np.empty((t1.shape[0], flips.shape[0]), dtype=np.float64)
    if numba_enabled(default_numba=True):
        return _gre_signals_jit(
            t1, b1, ti, flips, n_pulses, tr, seq_tr, inv_eff, out
        )
    return _gre_signals_numpy(t1, b1, ti, flips, n_pulses, tr, seq_tr, inv_eff, out)
