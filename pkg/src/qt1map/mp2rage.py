"""Forward MP2RAGE/MP3RAGE model, combined images, and lookup-table T1
inversion with B1 correction."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from ._kernels.mp2rage_kernels import gre_signals_batch
from .volume import ComplexVolume3D, Volume3D, check_same_grid

# Flag codes shared by the voxelwise mappers.
FLAG_OK = 0
FLAG_NO_SIGNAL = 1
FLAG_OUT_OF_RANGE = 2
FLAG_EMPTY_POSTERIOR = 3


class ProtocolError(ValueError):
    """Invalid acquisition timing (negative free-relaxation interval)."""


@dataclass(frozen=True)
class AcquisitionParams:
    """MP2RAGE/MP3RAGE timing and pulse parameters.

    Times in seconds, flip angles in degrees; `ti` are GRE block centers.
    Defaults are the 7T MP3RAGE protocol this toolkit simulates.
    """

    mp2rage_tr: float = 8.25
    tr: float = 0.006
    ti: tuple[float, ...] = (1.010, 3.683, 6.355)
    n_pulses: int = 225
    flip_angles: tuple[float, ...] = (4.0, 4.0, 4.0)
    inv_eff: float = 0.84

    def __post_init__(self):
        object.__setattr__(self, "ti", tuple(float(t) for t in self.ti))
        object.__setattr__(self, "flip_angles", tuple(float(a) for a in self.flip_angles))
        if not 2 <= len(self.ti) <= 3 or len(self.ti) != len(self.flip_angles):
            raise ValueError("need 2 or 3 inversion times, one flip angle each")
        if any(b <= a for a, b in zip(self.ti, self.ti[1:])):
            raise ValueError(f"ti must be strictly increasing, got {self.ti}")
        if not 0 < self.inv_eff <= 1:
            raise ValueError(f"inv_eff must be in (0, 1], got {self.inv_eff}")
        if self.n_pulses < 1 or self.tr <= 0 or self.mp2rage_tr <= 0:
            raise ValueError("n_pulses, tr, mp2rage_tr must be positive")
        for name, val in self.intervals().items():
            if val < 0:
                raise ProtocolError(f"negative free-relaxation interval {name} = {val:.6f} s")

    @property
    def n_blocks(self) -> int:
        return len(self.ti)

    @property
    def flips_rad(self) -> tuple[float, ...]:
        return tuple(math.radians(a) for a in self.flip_angles)

    def intervals(self) -> dict[str, float]:
        """Free-relaxation intervals: TA before the first block, gaps
        between blocks, TD after the last."""
        half = 0.5 * self.n_pulses * self.tr
        out = {"TA": self.ti[0] - half}
        for k in range(1, len(self.ti)):
            out[f"gap_{k}"] = self.ti[k] - self.ti[k - 1] - self.n_pulses * self.tr
        out["TD"] = self.mp2rage_tr - self.ti[-1] - half
        return out


def simulate_gre_signals(
    params: AcquisitionParams, t1: float, b1_factor: float = 1.0
) -> np.ndarray:
    """Steady-state GRE amplitudes, one per block (dimensionless,
    equilibrium magnetization normalized to 1)."""
    if t1 <= 0:
        raise ValueError(f"t1 must be positive, got {t1}")
    if b1_factor < 0:
        raise ValueError(f"b1_factor must be >= 0, got {b1_factor}")
    sig = gre_signals_batch(
        np.array([t1]),
        np.array([b1_factor]),
        params.ti,
        params.flips_rad,
        params.n_pulses,
        params.tr,
        params.mp2rage_tr,
        params.inv_eff,
    )[0]
    if not np.all(np.isfinite(sig)):
        raise ProtocolError(f"non-contractive period for t1={t1}, b1={b1_factor}")
    return sig


def simulate_gre_signals_batch(
    params: AcquisitionParams, t1, b1_factor
) -> np.ndarray:
    """Vectorized simulate_gre_signals over arrays of t1 / b1 (broadcast);
    degenerate entries come back NaN instead of raising."""
    return gre_signals_batch(
        t1,
        b1_factor,
        params.ti,
        params.flips_rad,
        params.n_pulses,
        params.tr,
        params.mp2rage_tr,
        params.inv_eff,
    )


def combine_pair(gre_i, gre_j):
    """Bounded combined image Re(conj(gi)*gj) / (|gi|^2 + |gj|^2).

    Accepts scalars or arrays; |S| <= 0.5 wherever defined, NaN where
    both inputs vanish.
    """
    gi = np.asarray(gre_i, dtype=np.complex128)
    gj = np.asarray(gre_j, dtype=np.complex128)
    num = (np.conj(gi) * gj).real
    den = np.abs(gi) ** 2 + np.abs(gj) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    if s.ndim == 0:
        return float(s)
    return s


def combine_volumes(gre_i: ComplexVolume3D, gre_j: ComplexVolume3D) -> Volume3D:
    check_same_grid(gre_i, gre_j)
    return Volume3D(combine_pair(gre_i.data, gre_j.data), gre_i.spacing)


def robust_combined_image(
    gre1: ComplexVolume3D,
    gre2: ComplexVolume3D,
    beta_scale: float = 0.25,
    brain_mask: np.ndarray | None = None,
) -> Volume3D:
    """Background-suppressed combined image with a constant beta added to
    the denominator; beta = beta_scale * mean(|g1|^2 + |g2|^2) over brain
    voxels (all voxels when no mask is given)."""
    check_same_grid(gre1, gre2)
    g1, g2 = gre1.data, gre2.data
    den = np.abs(g1) ** 2 + np.abs(g2) ** 2
    sel = den if brain_mask is None else den[brain_mask]
    beta = beta_scale * float(np.mean(sel))
    num = (np.conj(g1) * g2).real
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(den + beta > 0, num / np.where(den + beta > 0, den + beta, 1.0), np.nan)
    return Volume3D(s, gre1.spacing)


def default_t1_grid(n: int = 2000, t1_max: float = 5.0) -> np.ndarray:
    """Uniform grid on (0, t1_max]; 2000 points keeps |dS| between
    neighbors below 1e-3 for the default protocol."""
    return np.arange(1, n + 1, dtype=np.float64) * (t1_max / n)


def default_b1_grid(n: int = 41, lo: float = 0.0, hi: float = 2.0) -> np.ndarray:
    """Linearly spaced B1 correction factors, nearest-neighbor assigned."""
    return np.linspace(lo, hi, n)


@dataclass(frozen=True)
class LookupTable:
    """Combined-image value per T1 grid point for one (b1, GRE pair),
    with the invertible strictly-monotone branch recorded."""

    t1_grid: np.ndarray
    s_values: np.ndarray
    b1_factor: float
    gre_pair: tuple[int, int]
    branch: tuple[int, int]  # [lo, hi] inclusive index range, empty when lo > hi
    n_dropped: int = 0

    @property
    def branch_t1(self) -> np.ndarray:
        lo, hi = self.branch
        return self.t1_grid[lo : hi + 1]

    @property
    def branch_s(self) -> np.ndarray:
        lo, hi = self.branch
        return self.s_values[lo : hi + 1]

    @property
    def empty(self) -> bool:
        return self.branch[0] > self.branch[1]


def _monotone_branch(s: np.ndarray) -> tuple[int, int]:
    """Longest contiguous strictly-monotone run of finite values."""
    finite = np.isfinite(s)
    best = (0, -1)
    i = 0
    n = len(s)
    while i < n:
        if not finite[i]:
            i += 1
            continue
        j = i
        sign = 0
        while j + 1 < n and finite[j + 1]:
            d = s[j + 1] - s[j]
            ds = 0 if d == 0 else (1 if d > 0 else -1)
            if ds == 0:
                break
            if sign == 0:
                sign = ds
            elif ds != sign:
                break
            j += 1
        if j - i > best[1] - best[0]:
            best = (i, j)
        i = max(j, i) + 1
    return best


def build_lookup(
    params: AcquisitionParams,
    b1_factor: float,
    gre_pair: tuple[int, int] = (0, 1),
    t1_grid: np.ndarray | None = None,
) -> LookupTable:
    """Tabulate the combined image over a T1 grid for one B1 factor."""
    i, j = gre_pair
    if i == j or not (0 <= i < params.n_blocks and 0 <= j < params.n_blocks):
        raise ValueError(f"invalid gre_pair {gre_pair} for {params.n_blocks} blocks")
    if t1_grid is None:
        t1_grid = default_t1_grid()
    t1_grid = np.asarray(t1_grid, dtype=np.float64)
    if np.any(np.diff(t1_grid) <= 0) or t1_grid[0] <= 0 or t1_grid[-1] > 5.0 + 1e-12:
        raise ValueError("t1_grid must be ascending within (0, 5] s")
    sig = simulate_gre_signals_batch(params, t1_grid, b1_factor)
    s = combine_pair(sig[:, i].astype(np.complex128), sig[:, j].astype(np.complex128))
    n_dropped = int(np.sum(~np.isfinite(s)))
    branch = _monotone_branch(s)
    return LookupTable(t1_grid, s, float(b1_factor), (i, j), branch, n_dropped)


class InvertResult(NamedTuple):
    t1: float
    clamped: bool


def invert_lookup(table: LookupTable, s: float) -> InvertResult:
    """T1 at the combined-image value `s` by linear interpolation on the
    table's monotone branch; out-of-range values clamp to the branch
    endpoint and are flagged."""
    if table.empty:
        raise ValueError("lookup table has an empty monotone branch")
    if not np.isfinite(s):
        raise ValueError(f"s must be finite, got {s}")
    t1, clamped = invert_lookup_many(table, np.array([s]))
    return InvertResult(float(t1[0]), bool(clamped[0]))


def invert_lookup_many(table: LookupTable, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized invert_lookup; NaN inputs map to NaN + clamped flag."""
    if table.empty:
        raise ValueError("lookup table has an empty monotone branch")
    bs, bt = table.branch_s, table.branch_t1
    if bs[0] > bs[-1]:  # np.interp needs ascending abscissae
        bs, bt = bs[::-1], bt[::-1]
    s = np.asarray(s, dtype=np.float64)
    finite = np.isfinite(s)
    sq = np.where(finite, s, bs[0])
    t1 = np.interp(sq, bs, bt)
    clamped = ~finite | (sq < bs[0]) | (sq > bs[-1])
    t1 = np.where(finite, t1, np.nan)
    return t1, clamped


def point_estimate_t1_map(
    gres: Sequence[ComplexVolume3D],
    params: AcquisitionParams,
    b1_map: Volume3D,
    gre_pair: tuple[int, int] = (0, 1),
    b1_grid: np.ndarray | None = None,
    t1_grid: np.ndarray | None = None,
) -> tuple[Volume3D, np.ndarray]:
    """Voxelwise lookup-table T1 map with nearest-B1-grid-factor tables.

    Returns (T1 map in seconds, per-voxel flag array); flagged voxels
    are NaN in the map.
    """
    check_same_grid(*gres, b1_map)
    if b1_grid is None:
        b1_grid = default_b1_grid()
    i, j = gre_pair
    s_vol = combine_pair(gres[i].data, gres[j].data)
    b1_idx = np.abs(b1_map.data[..., None] - b1_grid).argmin(axis=-1)
    t1 = np.full(s_vol.shape, np.nan)
    flags = np.zeros(s_vol.shape, dtype=np.uint8)
    flags[~np.isfinite(s_vol)] = FLAG_NO_SIGNAL
    for idx in np.unique(b1_idx):
        table = build_lookup(params, b1_grid[idx], gre_pair, t1_grid)
        sel = (b1_idx == idx) & np.isfinite(s_vol)
        if table.empty:
            flags[b1_idx == idx] = np.where(
                flags[b1_idx == idx] == FLAG_OK, FLAG_NO_SIGNAL, flags[b1_idx == idx]
            )
            continue
        vals, clamped = invert_lookup_many(table, s_vol[sel])
        out = np.where(clamped, np.nan, vals)
        t1[sel] = out
        fsel = flags[sel]
        fsel[clamped] = FLAG_OUT_OF_RANGE
        flags[sel] = fsel
    return Volume3D(t1, b1_map.spacing), flags


def lookup_to_csv(table: LookupTable, path) -> None:
    """Two-column export (t1_seconds, s_value) for sensitivity sweeps."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t1_seconds", "s_value"])
        for t1, s in zip(table.t1_grid, table.s_values):
            w.writerow([f"{t1:.9g}", f"{s:.9g}"])
