"""Synthetic digital subjects: labeled geometry, T1 truth, smooth B1
fields, and paired MP2RAGE/MP3RAGE + SIR acquisitions with an imposed
tissue-dependent inter-method bias."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._kernels.sir_kernels import sir_signals_batch
from .mp2rage import AcquisitionParams, simulate_gre_signals_batch
from .nifti import read_nifti, write_nifti
from .sir import SechPulse, SirAcquisition, interp_sm, sm_vs_b1_table
from .volume import (
    LABEL_CGM,
    LABEL_NAMES,
    LABEL_SGM,
    LABEL_WM,
    ComplexVolume3D,
    LabelMask,
    Volume3D,
)

DEFAULT_TISSUE_T1 = {LABEL_WM: 1.48, LABEL_SGM: 1.74, LABEL_CGM: 2.05}
DEFAULT_BIAS = {LABEL_WM: 0.828, LABEL_SGM: 0.891, LABEL_CGM: 0.953}


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, tissue, noise, and bias parameters of one synthetic
    subject family."""

    dims: tuple[int, int, int] = (64, 64, 16)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    tissue_t1: dict[int, float] = field(default_factory=lambda: dict(DEFAULT_TISSUE_T1))
    t1_sd: float = 0.03
    geometry_seed: int = 0
    bias_factors: dict[int, float] = field(default_factory=lambda: dict(DEFAULT_BIAS))
    noise_sigma: float = 0.005
    sir_noise_frac: float = 0.01
    b1_amplitude: float = 0.2
    # two-pool nuisance parameters used to synthesize the SIR stack
    sir_psr: float = 0.15
    sir_kmf: float = 10.0
    sir_sf: float = -0.95
    sir_m_inf: float = 1.0

    def __post_init__(self) -> None:
        if any(d < 16 for d in self.dims):
            raise ValueError("phantom dims must be at least 16 per axis")
        if set(self.tissue_t1) != set(LABEL_NAMES):
            raise ValueError(f"tissue_t1 must cover labels {sorted(LABEL_NAMES)}")
        if any(v <= 0 for v in self.tissue_t1.values()):
            raise ValueError("tissue T1 values must be positive")
        if set(self.bias_factors) != set(self.tissue_t1):
            raise ValueError("bias_factors must cover the same labels as tissue_t1")
        if any(v <= 0 for v in self.bias_factors.values()):
            raise ValueError("bias factors must be positive")
        if self.t1_sd < 0 or self.noise_sigma < 0 or self.sir_noise_frac < 0:
            raise ValueError("noise levels must be non-negative")
        if not 0 <= self.b1_amplitude < 1:
            raise ValueError("b1 amplitude must be in [0, 1)")


def _unit_coords(dims: tuple[int, int, int]) -> tuple[np.ndarray, ...]:
    """Per-axis coordinates centered at 0, scaled to [-1, 1] on each axis."""
    axes = [
        np.linspace(-1.0, 1.0, d) if d > 1 else np.zeros(1) for d in dims
    ]
    return tuple(np.meshgrid(*axes, indexing="ij"))


def generate_phantom(
    spec: PhantomSpec, seed: int | None = None
) -> tuple[LabelMask, Volume3D]:
    """Nested smooth regions: cortical shell around a white-matter
    interior with subcortical blobs; per-voxel T1 = tissue mean +
    Gaussian within-tissue variation. Deterministic per seed."""
    if seed is None:
        seed = spec.geometry_seed
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6E0]))
    x, y, z = _unit_coords(spec.dims)

    # lumpy ellipsoid radius with a low-order angular perturbation
    wob = (
        0.04 * np.sin(2.0 * np.pi * x + rng.uniform(0, 2 * np.pi))
        + 0.04 * np.sin(2.0 * np.pi * y + rng.uniform(0, 2 * np.pi))
    )
    r = np.sqrt(x**2 + y**2 + z**2)
    outer = 0.92 + wob
    inner = 0.72 + wob

    labels = np.zeros(spec.dims, dtype=np.int16)
    labels[r < outer] = LABEL_CGM
    labels[r < inner] = LABEL_WM

    # subcortical blobs, deep enough to stay inside the white matter
    n_blobs = 5
    centers = rng.uniform(-0.35, 0.35, size=(n_blobs, 3))
    blob_r = 0.16
    total = int(np.count_nonzero(labels))
    for _ in range(12):
        sgm = np.zeros(spec.dims, dtype=bool)
        for c in centers:
            d2 = (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2
            sgm |= d2 < blob_r**2
        sgm &= labels == LABEL_WM
        if np.count_nonzero(sgm) >= 0.02 * total:
            break
        blob_r *= 1.2
    labels[sgm] = LABEL_SGM

    counts = {lab: int(np.count_nonzero(labels == lab)) for lab in (LABEL_WM, LABEL_SGM, LABEL_CGM)}
    total = sum(counts.values())
    if total == 0 or any(c < 0.02 * total for c in counts.values()):
        raise ValueError(f"dims {spec.dims} too small to host all three tissues: {counts}")

    t1 = np.zeros(spec.dims, dtype=np.float64)
    for lab, mean in sorted(spec.tissue_t1.items()):
        m = labels == lab
        t1[m] = mean + spec.t1_sd * rng.standard_normal(counts[lab])
    return LabelMask(labels, spec.spacing), Volume3D(t1, spec.spacing)


def synth_b1_field(
    dims: tuple[int, int, int],
    spacing: tuple[float, float, float],
    amplitude: float,
    seed: int,
) -> Volume3D:
    """Smooth low-order polynomial transmit-field factor centered at 1
    with range within [1 - amplitude, 1 + amplitude]."""
    if not 0 <= amplitude < 1:
        raise ValueError("amplitude must be in [0, 1)")
    if amplitude == 0:
        return Volume3D(np.ones(dims), spacing)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB1]))
    # coordinates share one scale so the per-voxel step is uniform and
    # the field stays smooth even on short axes
    half = (max(dims) - 1) / 2.0
    axes = [(np.arange(d) - (d - 1) / 2.0) / half for d in dims]
    u = np.meshgrid(*axes, indexing="ij")
    w = rng.normal(size=3)
    w /= np.linalg.norm(w)
    q = 0.3 * rng.normal(size=(3, 3))
    p = sum(w[i] * u[i] for i in range(3))
    p = p + sum(q[i, j] * u[i] * u[j] for i in range(3) for j in range(3))
    lo, hi = float(p.min()), float(p.max())
    mid = 0.5 * (lo + hi)
    span = max(0.5 * (hi - lo), 1e-12)
    return Volume3D(1.0 + amplitude * (p - mid) / span, spacing)


@dataclass(frozen=True)
class SyntheticSubject:
    labels: LabelMask
    t1_truth: Volume3D
    b1_map: Volume3D
    gres: tuple  # ComplexVolume3D per inversion time
    sir_stack: tuple  # Volume3D per TI
    spec: PhantomSpec
    seed: int
    acq_params: AcquisitionParams
    sir_acq: SirAcquisition


def simulate_subject(
    spec: PhantomSpec,
    params: AcquisitionParams,
    acq: SirAcquisition,
    seed: int,
    sm_table: np.ndarray | None = None,
) -> SyntheticSubject:
    """Forward-simulate one subject.

    MP2RAGE GREs come from bias_factors[label] * t1_truth with per-voxel
    B1 plus complex Gaussian noise; the SIR stack comes from the
    unbiased t1_truth (r1f = 1/T1) with per-voxel sm(b1) plus amplitude
    noise at sir_noise_frac * m_inf. Deterministic per (spec, seed).
    """
    labels, t1_truth = generate_phantom(spec, seed)
    b1 = synth_b1_field(spec.dims, spec.spacing, spec.b1_amplitude, seed)
    noise_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x401]))

    mask = labels.brain()
    flat = np.flatnonzero(mask.ravel())
    t1_flat = t1_truth.data.ravel()[flat]
    b1_flat = b1.data.ravel()[flat]
    lab_flat = labels.data.ravel()[flat]

    bias_flat = np.ones_like(t1_flat)
    for lab, f in spec.bias_factors.items():
        bias_flat[lab_flat == lab] = f

    gre_sig = simulate_gre_signals_batch(params, bias_flat * t1_flat, b1_flat)
    gres = []
    for k in range(gre_sig.shape[1]):
        re = np.zeros(spec.dims, dtype=np.float64)
        re.ravel()[flat] = gre_sig[:, k]
        re += noise_rng.normal(0.0, spec.noise_sigma, spec.dims) if spec.noise_sigma else 0.0
        im = noise_rng.normal(0.0, spec.noise_sigma, spec.dims) if spec.noise_sigma else np.zeros(spec.dims)
        gres.append(ComplexVolume3D(re + 1j * im, spec.spacing))

    if sm_table is None:
        sm_table = sm_vs_b1_table(np.linspace(0.0, 2.0, 41), SechPulse())
    sm_flat = interp_sm(sm_table, b1_flat)
    sir_sig = sir_signals_batch(
        1.0 / t1_flat, spec.sir_psr, spec.sir_kmf,
        np.full_like(t1_flat, spec.sir_sf), sm_flat, spec.sir_m_inf,
        np.asarray(acq.ti), acq.td,
    )
    sir_stack = []
    sd = spec.sir_noise_frac * spec.sir_m_inf
    for k in range(sir_sig.shape[1]):
        vol = np.zeros(spec.dims, dtype=np.float64)
        vol.ravel()[flat] = sir_sig[:, k]
        if sd:
            vol += noise_rng.normal(0.0, sd, spec.dims)
        sir_stack.append(Volume3D(vol, spec.spacing))

    return SyntheticSubject(
        labels=labels, t1_truth=t1_truth, b1_map=b1,
        gres=tuple(gres), sir_stack=tuple(sir_stack),
        spec=spec, seed=int(seed), acq_params=params, sir_acq=acq,
    )


# ---------------------------------------------------------------------------
# Persistence: one directory per subject, NIfTI volumes + text manifest.

MANIFEST_NAME = "subject.manifest"


def _spec_to_section(spec: PhantomSpec) -> dict[str, str]:
    d = {
        "dims": " ".join(str(v) for v in spec.dims),
        "spacing": " ".join(f"{v:.17g}" for v in spec.spacing),
        "t1_sd": f"{spec.t1_sd:.17g}",
        "geometry_seed": str(spec.geometry_seed),
        "noise_sigma": f"{spec.noise_sigma:.17g}",
        "sir_noise_frac": f"{spec.sir_noise_frac:.17g}",
        "b1_amplitude": f"{spec.b1_amplitude:.17g}",
        "sir_psr": f"{spec.sir_psr:.17g}",
        "sir_kmf": f"{spec.sir_kmf:.17g}",
        "sir_sf": f"{spec.sir_sf:.17g}",
        "sir_m_inf": f"{spec.sir_m_inf:.17g}",
    }
    for lab in sorted(spec.tissue_t1):
        d[f"t1_label_{lab}"] = f"{spec.tissue_t1[lab]:.17g}"
        d[f"bias_label_{lab}"] = f"{spec.bias_factors[lab]:.17g}"
    return d


def _spec_from_section(sec) -> PhantomSpec:
    labels = sorted(
        int(k.split("_")[-1]) for k in sec if k.startswith("t1_label_")
    )
    return PhantomSpec(
        dims=tuple(int(v) for v in sec["dims"].split()),
        spacing=tuple(float(v) for v in sec["spacing"].split()),
        tissue_t1={lab: float(sec[f"t1_label_{lab}"]) for lab in labels},
        t1_sd=float(sec["t1_sd"]),
        geometry_seed=int(sec["geometry_seed"]),
        bias_factors={lab: float(sec[f"bias_label_{lab}"]) for lab in labels},
        noise_sigma=float(sec["noise_sigma"]),
        sir_noise_frac=float(sec["sir_noise_frac"]),
        b1_amplitude=float(sec["b1_amplitude"]),
        sir_psr=float(sec["sir_psr"]),
        sir_kmf=float(sec["sir_kmf"]),
        sir_sf=float(sec["sir_sf"]),
        sir_m_inf=float(sec["sir_m_inf"]),
    )


def save_subject(subject: SyntheticSubject, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = configparser.ConfigParser()
    man["volumes"] = {}
    vols = man["volumes"]

    def put(role: str, vol) -> None:
        name = f"{role}.nii"
        write_nifti(vol, out / name)
        vols[role] = name

    put("labels", Volume3D(subject.labels.data.astype(np.float64), subject.labels.spacing))
    put("t1_truth", subject.t1_truth)
    put("b1_map", subject.b1_map)
    for k, g in enumerate(subject.gres):
        put(f"gre_{k}", g)
    for k, v in enumerate(subject.sir_stack):
        put(f"sir_{k:02d}", v)

    man["phantom"] = _spec_to_section(subject.spec)
    man["provenance"] = {"seed": str(subject.seed)}
    man["acquisition"] = {
        "mp2rage_tr": f"{subject.acq_params.mp2rage_tr:.17g}",
        "tr": f"{subject.acq_params.tr:.17g}",
        "ti": " ".join(f"{v:.17g}" for v in subject.acq_params.ti),
        "n_pulses": str(subject.acq_params.n_pulses),
        "flip_angles": " ".join(f"{v:.17g}" for v in subject.acq_params.flip_angles),
        "inv_eff": f"{subject.acq_params.inv_eff:.17g}",
    }
    man["sir_acquisition"] = {
        "ti": " ".join(f"{v:.17g}" for v in subject.sir_acq.ti),
        "td": f"{subject.sir_acq.td:.17g}",
        "sm": f"{subject.sir_acq.sm:.17g}",
    }
    with open(out / MANIFEST_NAME, "w") as fh:
        man.write(fh)
    return out


def load_subject(subj_dir: str | Path) -> SyntheticSubject:
    subj_dir = Path(subj_dir)
    man = configparser.ConfigParser()
    read = man.read(subj_dir / MANIFEST_NAME)
    if not read:
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {subj_dir}")
    vols = man["volumes"]
    spec = _spec_from_section(man["phantom"])
    acq_sec = man["acquisition"]
    params = AcquisitionParams(
        mp2rage_tr=float(acq_sec["mp2rage_tr"]),
        tr=float(acq_sec["tr"]),
        ti=tuple(float(v) for v in acq_sec["ti"].split()),
        n_pulses=int(acq_sec["n_pulses"]),
        flip_angles=tuple(float(v) for v in acq_sec["flip_angles"].split()),
        inv_eff=float(acq_sec["inv_eff"]),
    )
    sir_sec = man["sir_acquisition"]
    sir_acq = SirAcquisition(
        ti=tuple(float(v) for v in sir_sec["ti"].split()),
        td=float(sir_sec["td"]),
        sm=float(sir_sec["sm"]),
    )

    def vol(role: str):
        return read_nifti(subj_dir / vols[role])

    labels_f = vol("labels")
    labels = LabelMask(np.rint(labels_f.data).astype(np.int16), labels_f.spacing)
    n_gre = sum(1 for k in vols if k.startswith("gre_"))
    n_sir = sum(1 for k in vols if k.startswith("sir_"))
    return SyntheticSubject(
        labels=labels,
        t1_truth=vol("t1_truth"),
        b1_map=vol("b1_map"),
        gres=tuple(vol(f"gre_{k}") for k in range(n_gre)),
        sir_stack=tuple(vol(f"sir_{k:02d}") for k in range(n_sir)),
        spec=spec,
        seed=int(man["provenance"]["seed"]),
        acq_params=params,
        sir_acq=sir_acq,
    )
