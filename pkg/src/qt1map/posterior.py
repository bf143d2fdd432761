"""Monte Carlo posterior P(T1 | combined images, B1) and MAP/sigma maps.

The likelihood is histogrammed: per B1 factor, trials draw T1 uniform on
(0, t1_max], push it through the forward GRE model, add quadrature
Gaussian noise, form the combined image(s), and bin. Bayes with a
uniform T1 prior then turns normalized counts into a posterior whose
argmax and standard deviation give the T1 estimate and its uncertainty.

Trials are partitioned into fixed-size chunks with counter-based
(Philox) streams keyed on (seed, b1 index, chunk index); merged
histograms are order-independent integer sums, so results are
bit-identical regardless of scheduling.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .mp2rage import (
    FLAG_EMPTY_POSTERIOR,
    FLAG_NO_SIGNAL,
    FLAG_OUT_OF_RANGE,
    AcquisitionParams,
    default_b1_grid,
    simulate_gre_signals_batch,
)
from .volume import ComplexVolume3D, LabelMask, Volume3D, check_same_grid

_CHUNK = 1 << 19

PGRD_MAGIC = b"PGRD"
PGRD_VERSION = 1


@dataclass(frozen=True)
class NoiseModel:
    """Quadrature Gaussian noise: one standard deviation applied
    independently to the real and imaginary part of every GRE."""

    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def default_pairs(observables: int) -> tuple[tuple[int, int], ...]:
    if observables == 1:
        return ((0, 1),)
    if observables == 2:
        return ((0, 1), (0, 2))
    raise ValueError(f"observables must be 1 or 2, got {observables}")


@dataclass(frozen=True)
class GridSpec:
    """Histogram geometry for the Monte Carlo posterior."""

    t1_bins: int = 500
    t1_max: float = 5.0
    s_bins: int = 100
    b1_grid: tuple[float, ...] = tuple(default_b1_grid())
    observables: int = 1
    pairs: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if self.t1_bins < 1 or self.s_bins < 1 or self.t1_max <= 0:
            raise ValueError("t1_bins, s_bins, t1_max must be positive")
        if self.observables not in (1, 2):
            raise ValueError(f"observables must be 1 or 2, got {self.observables}")
        b1 = tuple(float(b) for b in self.b1_grid)
        if len(b1) < 1 or any(b < 0 for b in b1):
            raise ValueError("b1_grid must be nonempty and nonnegative")
        object.__setattr__(self, "b1_grid", b1)
        pairs = self.pairs if self.pairs is not None else default_pairs(self.observables)
        pairs = tuple((int(i), int(j)) for i, j in pairs)
        if len(pairs) != self.observables or any(i == j for i, j in pairs):
            raise ValueError(f"need {self.observables} distinct-index pairs, got {pairs}")
        object.__setattr__(self, "pairs", pairs)

    @property
    def dt1(self) -> float:
        return self.t1_max / self.t1_bins

    @property
    def t1_centers(self) -> np.ndarray:
        return (np.arange(self.t1_bins) + 0.5) * self.dt1

    @property
    def s_cells(self) -> int:
        return self.s_bins**self.observables

    def s_bin_of(self, s) -> tuple[np.ndarray, np.ndarray]:
        """(bin index, valid) for combined-image values; s == +0.5 lands in
        the top bin, anything outside [-0.5, 0.5] or non-finite is invalid."""
        s = np.asarray(s, dtype=np.float64)
        # the analytic bound is |s| <= 0.5; allow a rounding-sized margin so
        # noiseless values computed at exactly +-0.5 never count as overflow
        with np.errstate(invalid="ignore"):
            valid = np.isfinite(s) & (s >= -0.5 - 1e-12) & (s <= 0.5 + 1e-12)
        idx = np.floor((np.where(valid, s, 0.0) + 0.5) * self.s_bins).astype(np.int64)
        idx = np.clip(idx, 0, self.s_bins - 1)
        return idx, valid


@dataclass
class PosteriorGrid:
    """Raw Monte Carlo histogram: counts per (b1, T1 bin, S bin(s)).

    counts[k] is dense (t1_bins, s_bins) for one observable and sparse
    CSC (t1_bins, s_bins**2) for the joint grid.
    """

    spec: GridSpec
    params: AcquisitionParams
    noise: NoiseModel
    trials: int
    counts: list
    overflow: int = 0
    invalid: int = 0

    def dense_counts(self, b1_idx: int) -> np.ndarray:
        c = self.counts[b1_idx]
        if sparse.issparse(c):
            return np.asarray(c.todense(), dtype=np.int64).reshape(
                self.spec.t1_bins, self.spec.s_cells
            )
        return c


def run_monte_carlo(
    params: AcquisitionParams,
    noise: NoiseModel,
    trials: int,
    grid_spec: GridSpec | None = None,
) -> PosteriorGrid:
    """Histogram `trials` forward simulations per B1 grid point."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    spec = grid_spec if grid_spec is not None else GridSpec()
    for i, j in spec.pairs:
        if not (0 <= i < params.n_blocks and 0 <= j < params.n_blocks):
            raise ValueError(f"pair ({i},{j}) invalid for {params.n_blocks} blocks")
    nb = params.n_blocks
    counts: list = []
    overflow = 0
    invalid = 0
    for bi, b1 in enumerate(spec.b1_grid):
        acc = np.zeros(spec.t1_bins * spec.s_cells, dtype=np.int64)
        done = 0
        part = 0
        while done < trials:
            m = min(_CHUNK, trials - done)
            rng = np.random.Generator(
                np.random.Philox(key=[np.uint64(noise.seed), np.uint64((bi << 32) + part)])
            )
            t1 = spec.t1_max * (1.0 - rng.random(m))
            sig = simulate_gre_signals_batch(params, t1, b1)
            nre = rng.normal(0.0, noise.sigma, (m, nb)) if noise.sigma > 0 else 0.0
            nim = rng.normal(0.0, noise.sigma, (m, nb)) if noise.sigma > 0 else 0.0
            g = sig + nre + 1j * nim
            t1_idx = np.floor(t1 / spec.t1_max * spec.t1_bins).astype(np.int64)
            np.clip(t1_idx, 0, spec.t1_bins - 1, out=t1_idx)
            lin = t1_idx
            keep = np.ones(m, dtype=bool)
            for i, j in spec.pairs:
                num = (np.conj(g[:, i]) * g[:, j]).real
                den = np.abs(g[:, i]) ** 2 + np.abs(g[:, j]) ** 2
                with np.errstate(invalid="ignore", divide="ignore"):
                    s = num / den
                s_idx, valid = spec.s_bin_of(s)
                oob = np.isfinite(s) & ~valid
                overflow += int(np.sum(oob & keep))
                invalid += int(np.sum(~np.isfinite(s) & keep))
                keep &= valid
                lin = lin * spec.s_bins + s_idx
            acc += np.bincount(lin[keep], minlength=acc.size)
            done += m
            part += 1
        if overflow:
            raise RuntimeError(
                f"{overflow} trials fell outside [-0.5, 0.5]; the combined "
                "image is bounded, so this indicates a broken configuration"
            )
        grid2d = acc.reshape(spec.t1_bins, spec.s_cells)
        if spec.observables == 2:
            counts.append(sparse.csc_array(grid2d))
        else:
            counts.append(grid2d)
    return PosteriorGrid(spec, params, noise, trials, counts, overflow, invalid)


class Posterior:
    """Normalized posterior slices over T1 for fixed (b1, S bin(s)).

    Each nonempty slice is a density over T1 bin centers integrating to
    1; empty slices (no Monte Carlo support) are reported as None.
    """

    def __init__(self, grid: PosteriorGrid, prior: np.ndarray | None = None):
        self.spec = grid.spec
        self.grid = grid
        t1b = self.spec.t1_bins
        if prior is None:
            prior = np.full(t1b, 1.0 / self.spec.t1_max)
        prior = np.asarray(prior, dtype=np.float64)
        if prior.shape != (t1b,) or np.any(prior < 0) or prior.sum() <= 0:
            raise ValueError("prior must be a nonnegative density over the T1 bins")
        self.prior = prior / (prior.sum() * self.spec.dt1)
        self._row_totals = []
        self._cache: dict[tuple, np.ndarray | None] = {}
        self._dense = []
        for bi in range(len(self.spec.b1_grid)):
            c = grid.counts[bi]
            if sparse.issparse(c):
                tot = np.asarray(c.sum(axis=1)).ravel().astype(np.float64)
                self._row_totals.append(tot)
                self._dense.append(None)
            else:
                tot = c.sum(axis=1).astype(np.float64)
                self._row_totals.append(tot)
                safe = np.where(tot > 0, tot, 1.0)
                lik = c / safe[:, None]
                post = lik * self.prior[:, None]
                norm = post.sum(axis=0) * self.spec.dt1
                with np.errstate(invalid="ignore", divide="ignore"):
                    post = np.where(norm > 0, post / np.where(norm > 0, norm, 1.0), 0.0)
                # a constant likelihood carries no information: return the
                # prior itself rather than a renormalized copy of it
                flat = (norm > 0) & (lik.max(axis=0) == lik.min(axis=0))
                post[:, flat] = self.prior[:, None]
                self._dense.append((post, norm > 0))

    @property
    def observables(self) -> int:
        return self.spec.observables

    def slice(self, b1_idx: int, s_idx) -> np.ndarray | None:
        """Posterior density over T1 centers, or None for an empty slice.

        s_idx is an int (one observable) or an index tuple (joint).
        """
        if self.spec.observables == 1:
            s = int(s_idx) if np.isscalar(s_idx) else int(np.ravel(s_idx)[0])
            post, ok = self._dense[b1_idx]
            return post[:, s].copy() if ok[s] else None
        s1, s2 = (int(v) for v in s_idx)
        key = (b1_idx, s1, s2)
        if key in self._cache:
            out = self._cache[key]
            return None if out is None else out.copy()
        lin = s1 * self.spec.s_bins + s2
        col = self.grid.counts[b1_idx][:, [lin]].toarray().ravel().astype(np.float64)
        tot = self._row_totals[b1_idx]
        lik = np.where(tot > 0, col / np.where(tot > 0, tot, 1.0), 0.0)
        post = lik * self.prior
        norm = post.sum() * self.spec.dt1
        if norm > 0 and lik.max() == lik.min():
            out = self.prior.copy()  # uninformative likelihood
        else:
            out = post / norm if norm > 0 else None
        self._cache[key] = out
        return None if out is None else out.copy()


def posterior_from_counts(grid: PosteriorGrid, prior: np.ndarray | None = None) -> Posterior:
    """Bayes with the given T1 prior density (default uniform)."""
    return Posterior(grid, prior)


@dataclass
class MapResult:
    t1_map: Volume3D
    sigma_t1_map: Volume3D
    flags: np.ndarray  # uint8: FLAG_* codes per voxel


def map_estimate(
    post: Posterior,
    observables: list[Volume3D],
    b1_map: Volume3D,
) -> MapResult:
    """Voxelwise MAP T1 and posterior standard deviation.

    `observables` holds one combined-image volume per posterior
    observable, ordered as the grid's pairs. Argmax ties break toward
    the smaller T1 bin.
    """
    spec = post.spec
    if len(observables) != spec.observables:
        raise ValueError(
            f"grid expects {spec.observables} observable(s), got {len(observables)}"
        )
    check_same_grid(*observables, b1_map)
    shape = b1_map.dims
    b1g = np.asarray(spec.b1_grid)
    if not np.all(np.isfinite(b1_map.data)):
        raise ValueError("b1_map must be finite everywhere")
    b1_idx = np.abs(b1_map.data[..., None] - b1g).argmin(axis=-1).ravel()

    flags = np.zeros(np.prod(shape), dtype=np.uint8)
    s_idx_all = []
    for vol in observables:
        idx, valid = spec.s_bin_of(vol.data.ravel())
        flags[~valid] = FLAG_OUT_OF_RANGE
        s_idx_all.append(idx)

    key = b1_idx.copy()
    for idx in s_idx_all:
        key = key * spec.s_bins + idx

    t1 = np.full(key.shape, np.nan)
    sig = np.full(key.shape, np.nan)
    ok = flags == 0
    centers = spec.t1_centers
    dt1 = spec.dt1
    uniq, inv = np.unique(key[ok], return_inverse=True)
    t1_u = np.full(uniq.shape, np.nan)
    sig_u = np.full(uniq.shape, np.nan)
    empty_u = np.zeros(uniq.shape, dtype=bool)
    for u, k in enumerate(uniq):
        rem, sbins = k, []
        for _ in range(spec.observables):
            sbins.append(int(rem % spec.s_bins))
            rem //= spec.s_bins
        sbins = tuple(reversed(sbins))
        bi = int(rem)
        p = post.slice(bi, sbins if spec.observables == 2 else sbins[0])
        if p is None:
            empty_u[u] = True
            continue
        t1_u[u] = centers[int(np.argmax(p))]
        mass = p * dt1
        mean = float(np.sum(mass * centers))
        var = float(np.sum(mass * centers**2)) - mean**2
        sig_u[u] = np.sqrt(max(var, 0.0))
    t1[ok] = t1_u[inv]
    sig[ok] = sig_u[inv]
    fl_ok = flags[ok]
    fl_ok[empty_u[inv]] = FLAG_EMPTY_POSTERIOR
    flags[ok] = fl_ok

    return MapResult(
        Volume3D(t1.reshape(shape), b1_map.spacing),
        Volume3D(sig.reshape(shape), b1_map.spacing),
        flags.reshape(shape).astype(np.uint8),
    )


def estimate_noise_sigma(
    gres: list[ComplexVolume3D],
    roi: LabelMask,
    params: AcquisitionParams,
    b1_factor: float = 1.0,
    t1_range: tuple[float, float] = (0.5, 3.0),
    rescale: bool = True,
) -> float:
    """Noise standard deviation for the Monte Carlo simulation.

    Takes the largest sample standard deviation across the real and
    imaginary parts of all GREs inside the ROI, then rescales it by the
    ratio of simulated to acquired GRE dynamic range (max - min of the
    magnitudes, simulated over T1 in `t1_range`) so the simulation runs
    at approximately the acquired contrast-to-noise ratio.
    """
    sel = roi.brain()
    n = int(np.sum(sel))
    if n < 8:
        raise ValueError(f"ROI must contain at least 8 voxels, got {n}")
    sds = []
    for g in gres:
        vals = g.data[sel]
        sds.append(float(np.std(vals.real, ddof=1)))
        sds.append(float(np.std(vals.imag, ddof=1)))
    raw = max(sds)
    if not rescale:
        return raw
    t1s = np.linspace(t1_range[0], t1_range[1], 200)
    sim = np.abs(simulate_gre_signals_batch(params, t1s, b1_factor))
    sim_range = float(sim.max() - sim.min())
    acq = np.concatenate([np.abs(g.data[sel]) for g in gres])
    acq_range = float(acq.max() - acq.min())
    if acq_range <= 0:
        return 0.0 if raw == 0 else raw
    return raw * sim_range / acq_range


# ---------------------------------------------------------------------------
# Serialization: "PGRD" binary container and CSV slice export.

def pgrd_write(grid: PosteriorGrid, path) -> None:
    """magic, version, grid-spec block, then little-endian u64 counts in
    (b1, t1, s...) row-major order."""
    spec, p = grid.spec, grid.params
    with open(path, "wb") as fh:
        fh.write(PGRD_MAGIC)
        fh.write(struct.pack("<I", PGRD_VERSION))
        fh.write(
            struct.pack(
                "<IIII", spec.observables, spec.t1_bins, spec.s_bins, len(spec.b1_grid)
            )
        )
        fh.write(struct.pack("<QQQ", grid.trials, grid.overflow, grid.invalid))
        fh.write(struct.pack("<dqd", grid.noise.sigma, grid.noise.seed, spec.t1_max))
        fh.write(struct.pack("<I", len(spec.pairs)))
        for i, j in spec.pairs:
            fh.write(struct.pack("<II", i, j))
        # acquisition echo so a grid file is self-describing
        fh.write(struct.pack("<ddId", p.mp2rage_tr, p.tr, p.n_pulses, p.inv_eff))
        fh.write(struct.pack("<I", p.n_blocks))
        for t in p.ti:
            fh.write(struct.pack("<d", t))
        for a in p.flip_angles:
            fh.write(struct.pack("<d", a))
        fh.write(np.asarray(spec.b1_grid, dtype="<f8").tobytes())
        for bi in range(len(spec.b1_grid)):
            fh.write(grid.dense_counts(bi).astype("<u8").tobytes())


def pgrd_read(path) -> PosteriorGrid:
    with open(path, "rb") as fh:
        if fh.read(4) != PGRD_MAGIC:
            raise ValueError("not a PGRD file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != PGRD_VERSION:
            raise ValueError(f"unsupported PGRD version {version}")
        observables, t1_bins, s_bins, nb1 = struct.unpack("<IIII", fh.read(16))
        trials, overflow, invalid = struct.unpack("<QQQ", fh.read(24))
        sigma, seed, t1_max = struct.unpack("<dqd", fh.read(24))
        (npairs,) = struct.unpack("<I", fh.read(4))
        pairs = tuple(struct.unpack("<II", fh.read(8)) for _ in range(npairs))
        mp2rage_tr, tr, n_pulses, inv_eff = struct.unpack("<ddId", fh.read(28))
        (nblk,) = struct.unpack("<I", fh.read(4))
        ti = struct.unpack(f"<{nblk}d", fh.read(8 * nblk))
        flips = struct.unpack(f"<{nblk}d", fh.read(8 * nblk))
        b1_grid = np.frombuffer(fh.read(8 * nb1), dtype="<f8")
        spec = GridSpec(t1_bins, t1_max, s_bins, tuple(b1_grid), observables, pairs)
        params = AcquisitionParams(mp2rage_tr, tr, ti, n_pulses, flips, inv_eff)
        counts = []
        cells = t1_bins * s_bins**observables
        for _ in range(nb1):
            arr = np.frombuffer(fh.read(8 * cells), dtype="<u8").astype(np.int64)
            arr = arr.reshape(t1_bins, s_bins**observables)
            counts.append(sparse.csc_array(arr) if observables == 2 else arr)
    return PosteriorGrid(
        spec, params, NoiseModel(sigma, seed), trials, counts, overflow, invalid
    )


def posterior_slice_csv(post: Posterior, b1_idx: int, s_idx, path) -> None:
    """One fixed-(b1, S) posterior slice as (t1_seconds, density) rows."""
    p = post.slice(b1_idx, s_idx)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t1_seconds", "posterior_density"])
        if p is None:
            return
        for c, v in zip(post.spec.t1_centers, p):
            w.writerow([f"{c:.9g}", f"{v:.9g}"])
