"""Two-pool selective inversion recovery (SIR): signal model, sech
inversion-pulse simulation for the macromolecular inversion coefficient,
and voxelwise least-squares T1 fitting (T1 = 1/r1f with r1m tied)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._kernels.sir_kernels import sir_fit_batch, sir_signal_curve, sir_signals_batch
from .volume import Volume3D, check_same_grid

DEFAULT_TI = (
    0.006, 0.010, 0.016, 0.026, 0.043, 0.068, 0.110,
    0.178, 0.288, 0.468, 0.760, 1.230, 2.000, 8.000,
)

FIT_OK = 0
FIT_MAX_ITER = 1
FIT_SINGULAR = 2
FIT_NON_IDENTIFIABLE = 3


@dataclass(frozen=True)
class SirAcquisition:
    """Multi-TI SIR sampling scheme with a shared pre-delay and the
    macromolecular inversion coefficient for this B1 scaling."""

    ti: tuple[float, ...] = DEFAULT_TI
    td: float = 0.0025
    sm: float = 0.83

    def __post_init__(self) -> None:
        ti = tuple(float(t) for t in self.ti)
        object.__setattr__(self, "ti", ti)
        if len(ti) == 0 or any(t <= 0 for t in ti):
            raise ValueError("inversion times must be positive")
        if any(b <= a for a, b in zip(ti, ti[1:])):
            raise ValueError("inversion times must be strictly ascending")
        if self.td < 0:
            raise ValueError("pre-delay td must be non-negative")
        if abs(self.sm) > 1:
            raise ValueError("|sm| must be <= 1")

    def with_sm(self, sm: float) -> "SirAcquisition":
        return SirAcquisition(ti=self.ti, td=self.td, sm=float(sm))


@dataclass(frozen=True)
class SirModelParams:
    """Two-pool exchange-relaxation parameters; kfm = kmf * psr by
    detailed balance, and fitting ties r1m = r1f."""

    r1f: float
    psr: float
    kmf: float
    sf: float
    m_inf: float
    r1m: float | None = None

    def __post_init__(self) -> None:
        if self.r1m is None:
            object.__setattr__(self, "r1m", float(self.r1f))
        if self.r1f <= 0 or self.r1m <= 0:
            raise ValueError("relaxation rates must be positive")
        if self.psr < 0:
            raise ValueError("pool-size ratio must be >= 0")
        if self.kmf < 0:
            raise ValueError("exchange rate kmf must be >= 0")
        if abs(self.sf) > 1:
            raise ValueError("|sf| must be <= 1")
        if self.m_inf <= 0:
            raise ValueError("m_inf must be positive")

    @property
    def kfm(self) -> float:
        return self.kmf * self.psr

    @property
    def t1(self) -> float:
        return 1.0 / self.r1f

    def as_free_vector(self) -> np.ndarray:
        """Free-parameter vector in fit order (r1f, psr, kmf, sf, m_inf)."""
        return np.array([self.r1f, self.psr, self.kmf, self.sf, self.m_inf])


def sir_signal(p: SirModelParams, acq: SirAcquisition) -> np.ndarray:
    """Steady-state SIR signal m_inf*Mf at each inversion time."""
    return sir_signal_curve(
        p.r1f, p.r1m, p.psr, p.kmf, p.sf, acq.sm, p.m_inf,
        np.asarray(acq.ti), acq.td,
    )


# ---------------------------------------------------------------------------
# Inversion-pulse Bloch simulation (hyperbolic secant, no relaxation).


@dataclass(frozen=True)
class SechPulse:
    """Adiabatic hyperbolic-secant inversion pulse: amplitude
    peak*sech(beta*tau), frequency sweep -mu*beta*tanh(beta*tau)."""

    duration: float = 0.010
    peak: float = 6000.0  # rad/s at b1 = 1
    mu: float = 5.0
    beta: float = 1060.0  # rad/s

    def __post_init__(self) -> None:
        if self.duration <= 0:
            raise ValueError("pulse duration must be positive")
        if self.peak < 0 or self.mu <= 0 or self.beta <= 0:
            raise ValueError("pulse parameters must be positive")


def simulate_inversion_sm(
    b1_factor: float,
    pulse: SechPulse = SechPulse(),
    offset: float = 0.0,
    n_steps: int = 4000,
) -> float:
    """Final Mz after the sech pulse scaled by b1_factor, starting from
    (0, 0, 1); RK4 integration of the relaxation-free Bloch equations.
    The same machinery with offset=0 gives the free-pool coefficient."""
    if b1_factor < 0:
        raise ValueError("b1_factor must be >= 0")
    if b1_factor == 0.0:
        return 1.0
    T = pulse.duration
    dt = T / n_steps
    m = np.array([0.0, 0.0, 1.0])

    def deriv(tau: float, mv: np.ndarray) -> np.ndarray:
        sech = 1.0 / math.cosh(pulse.beta * tau)
        w1 = b1_factor * pulse.peak * sech
        dw = -pulse.mu * pulse.beta * math.tanh(pulse.beta * tau) + offset
        # dM/dt = Omega x M, Omega = (w1, 0, dw)
        return np.array([
            -dw * mv[1],
            dw * mv[0] - w1 * mv[2],
            w1 * mv[1],
        ])

    t = -0.5 * T
    for _ in range(n_steps):
        k1 = deriv(t, m)
        k2 = deriv(t + 0.5 * dt, m + 0.5 * dt * k1)
        k3 = deriv(t + 0.5 * dt, m + 0.5 * dt * k2)
        k4 = deriv(t + dt, m + dt * k3)
        m = m + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t += dt
    return float(m[2])


def sm_vs_b1_table(
    b1_values: Sequence[float],
    pulse: SechPulse = SechPulse(),
) -> np.ndarray:
    """(N, 2) array of (b1_factor, sm) rows."""
    b1_values = np.asarray(b1_values, dtype=np.float64)
    sm = np.array([simulate_inversion_sm(b, pulse) for b in b1_values])
    return np.column_stack([b1_values, sm])


def write_sm_table(path: str | Path, table: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["b1_factor", "sm"])
        for b1, sm in np.asarray(table, dtype=np.float64):
            w.writerow([f"{b1:.17g}", f"{sm:.17g}"])


def read_sm_table(path: str | Path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if [h.strip() for h in header] != ["b1_factor", "sm"]:
            raise ValueError(f"unexpected sm table header: {header!r}")
        for row in r:
            rows.append((float(row[0]), float(row[1])))
    table = np.array(rows, dtype=np.float64)
    if table.size == 0:
        raise ValueError("empty sm table")
    if np.any(np.diff(table[:, 0]) <= 0):
        raise ValueError("b1_factor column must be strictly ascending")
    return table


def interp_sm(table: np.ndarray, b1: np.ndarray | float) -> np.ndarray | float:
    """Linear interpolation of sm at the given b1 factors (clamped)."""
    return np.interp(b1, table[:, 0], table[:, 1])


# ---------------------------------------------------------------------------
# Fitting.

DEFAULT_BOUNDS_LO = (0.05, 0.0, 0.0, -1.0, 1e-6)
DEFAULT_BOUNDS_HI = (10.0, 1.0, 100.0, 1.0, 1e6)
DEFAULT_INIT = SirModelParams(r1f=0.7, psr=0.1, kmf=12.0, sf=-0.9, m_inf=1.0)


@dataclass(frozen=True)
class SirFitResult:
    params: SirModelParams
    cost: float
    iterations: int
    converged: bool
    identifiable: bool = True

    @property
    def t1(self) -> float:
        return self.params.t1


def _identifiable(curve: np.ndarray) -> bool:
    scale = max(float(np.max(np.abs(curve))), 1e-300)
    return float(np.ptp(curve)) > 1e-8 * scale


def fit_sir(
    curve: np.ndarray,
    acq: SirAcquisition,
    init: SirModelParams = DEFAULT_INIT,
    bounds: tuple[Sequence[float], Sequence[float]] = (DEFAULT_BOUNDS_LO, DEFAULT_BOUNDS_HI),
    max_iter: int = 500,
) -> SirFitResult:
    """Damped least-squares fit of one SIR curve; r1m tied to r1f."""
    curve = np.asarray(curve, dtype=np.float64)
    if curve.shape != (len(acq.ti),):
        raise ValueError("curve length must match the number of inversion times")
    if not np.all(np.isfinite(curve)):
        raise ValueError("curve must be finite")
    if not _identifiable(curve):
        return SirFitResult(init, float(np.sum((curve - np.mean(curve)) ** 2)),
                            0, False, identifiable=False)
    lb, ub = (np.asarray(b, dtype=np.float64) for b in bounds)
    p, c, it, st = sir_fit_batch(
        curve[None, :], acq.sm, np.asarray(acq.ti), acq.td,
        init.as_free_vector(), lb, ub, max_iter,
    )
    params = SirModelParams(r1f=p[0, 0], psr=p[0, 1], kmf=p[0, 2],
                            sf=p[0, 3], m_inf=p[0, 4])
    return SirFitResult(params, float(c[0]), int(it[0]), st[0] == FIT_OK)


def sir_t1_map(
    volumes: Sequence[Volume3D],
    acq: SirAcquisition,
    sm_map: Volume3D | None = None,
    mask: np.ndarray | None = None,
    init: SirModelParams = DEFAULT_INIT,
    bounds: tuple[Sequence[float], Sequence[float]] = (DEFAULT_BOUNDS_LO, DEFAULT_BOUNDS_HI),
    max_iter: int = 500,
) -> tuple[Volume3D, np.ndarray]:
    """Voxelwise SIR T1 map.

    Returns (t1_map, flags); flags holds the per-voxel fit status
    (FIT_OK/FIT_MAX_ITER/FIT_SINGULAR/FIT_NON_IDENTIFIABLE), -1 outside
    the mask. Failed voxels are NaN in the map. sm_map overrides the
    acquisition's scalar sm voxel-by-voxel.
    """
    if len(volumes) != len(acq.ti):
        raise ValueError("need one volume per inversion time")
    check_same_grid(*volumes)
    shape = volumes[0].data.shape
    if sm_map is not None and sm_map.data.shape != shape:
        raise ValueError("sm_map grid does not match the TI volumes")
    if mask is None:
        mask = np.ones(shape, dtype=bool)
    elif mask.shape != shape:
        raise ValueError("mask grid does not match the TI volumes")
    mask = np.asarray(mask, dtype=bool)

    t1 = np.full(shape, np.nan, dtype=np.float64)
    flags = np.full(shape, -1, dtype=np.int16)
    idx = np.flatnonzero(mask.ravel())
    if idx.size == 0:
        return Volume3D(t1, volumes[0].spacing), flags

    Y = np.stack([v.data.ravel()[idx] for v in volumes], axis=1)
    finite = np.all(np.isfinite(Y), axis=1)
    ident = finite & (np.ptp(Y, axis=1) > 1e-8 * np.maximum(np.max(np.abs(Y), axis=1), 1e-300))
    flags_flat = np.full(idx.size, FIT_NON_IDENTIFIABLE, dtype=np.int16)

    fit_rows = np.flatnonzero(ident)
    if fit_rows.size:
        sm = (sm_map.data.ravel()[idx[fit_rows]] if sm_map is not None
              else np.full(fit_rows.size, acq.sm))
        lb, ub = (np.asarray(b, dtype=np.float64) for b in bounds)
        p, c, it, st = sir_fit_batch(
            Y[fit_rows], sm, np.asarray(acq.ti), acq.td,
            init.as_free_vector(), lb, ub, max_iter,
        )
        t1_fit = np.where(st == FIT_SINGULAR, np.nan, 1.0 / p[:, 0])
        t1.ravel()[idx[fit_rows]] = t1_fit
        flags_flat[fit_rows] = st.astype(np.int16)
    flags.ravel()[idx] = flags_flat
    return Volume3D(t1, volumes[0].spacing), flags
