"""Acceptance suite: twelve end-to-end criteria, one PASS/FAIL line each.

The two expensive shared artifacts are built once per module:
  * ``cohort``  — the full default pipeline (4 subjects, 64x64x16,
    sigma 0.005, 1e6-trial posterior grid, point/MAP/SIR maps,
    leave-one-out cross-validated calibration at 2000 steps).
  * ``sweeps``  — the noise and patch-size sweeps on a reduced
    (32x32x16, width-8) configuration that preserves the trends under
    test while staying inside the runtime budget.

Each criterion prints ``CRITERION n: PASS/FAIL — detail`` and then
asserts, so a red criterion is both visible and failing.
"""

import csv
import hashlib
import time
from collections import defaultdict

import numpy as np
import pytest
from scipy.special import betainc

from conftest import iterate_gre_signals
from qt1map.calib import (NetworkConfig, backward, concat_datasets,
                          extract_patches, forward, init_weights, predict_map,
                          train)
from qt1map.cli import main
from qt1map.mp2rage import (AcquisitionParams, build_lookup, combine_pair,
                            invert_lookup, simulate_gre_signals)
from qt1map.nifti import read_nifti, write_nifti
from qt1map.phantom import DEFAULT_BIAS
from qt1map.posterior import (GridSpec, NoiseModel, PosteriorGrid,
                              map_estimate, pgrd_read, posterior_from_counts,
                              run_monte_carlo)
from qt1map.sir import (DEFAULT_TI, SirAcquisition, SirModelParams, fit_sir,
                        sir_signal)
from qt1map.stats import paired_t_test, tissue_metrics
from qt1map.volume import (LABEL_CGM, LABEL_SGM, LABEL_WM, ComplexVolume3D,
                           LabelMask, Volume3D)

TISSUES = (LABEL_WM, LABEL_SGM, LABEL_CGM)


def report(num: int, ok: bool, detail: str) -> None:
    print(f"\nCRITERION {num}: {'PASS' if ok else 'FAIL'} — {detail}")
    assert ok, f"criterion {num}: {detail}"


def protocol() -> AcquisitionParams:
    return AcquisitionParams(
        mp2rage_tr=8.25, tr=0.006, ti=(1.010, 3.683, 6.355),
        n_pulses=225, flip_angles=(4.0, 4.0, 4.0), inv_eff=0.84,
    )


# ---------------------------------------------------------------------------
# Shared pipeline fixtures.

COHORT_CFG = """\
[run]
seed = 1234
out_dir = {out}

[monte_carlo]
sigma = 0.005
observables = 1

[network]
; 2000 steps (vs the 10000-step default) with a proportionally larger
; learning rate; patience disabled so the step budget is exact
learning_rate = 3e-3
max_steps = 2000
patience = 2000
val_cap = 2000
"""

SWEEP_CFG = """\
[run]
seed = 1234
out_dir = {out}

[phantom]
dims = 32 32 16

[monte_carlo]
sigma = 0.005
observables = 1

[network]
width = 8
blocks = 2
learning_rate = 3e-3
batch_size = 128
patience = 2000
val_cap = 2000

[sweep]
max_steps = 800
"""


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    """Default 64x64x16 cohort: phantom -> grid -> point/MAP/SIR -> LOO CV."""
    root = tmp_path_factory.mktemp("cohort")
    out = root / "out"
    cfg = root / "cohort.cfg"
    cfg.write_text(COHORT_CFG.format(out=out))
    base = ["--config", str(cfg)]
    times = {}
    for stage, cmdline in (
        ("phantom", ["phantom"]),
        ("montecarlo", ["montecarlo"]),
        ("fit_point", ["fit", "--method", "point"]),
        ("fit_map2", ["fit", "--method", "map2"]),
        ("fit_sir", ["fit", "--method", "sir"]),
        ("cv", ["calibrate", "cv"]),
    ):
        t0 = time.perf_counter()
        code = main(base + cmdline)
        times[stage] = time.perf_counter() - t0
        assert code == 0, f"{cmdline} exited {code}"
    return {"base": base, "out": out, "times": times}


@pytest.fixture(scope="module")
def sweeps(tmp_path_factory):
    """Noise and patch-size sweeps on the reduced configuration."""
    root = tmp_path_factory.mktemp("sweeps")
    out = root / "out"
    cfg = root / "sweep.cfg"
    cfg.write_text(SWEEP_CFG.format(out=out))
    base = ["--config", str(cfg)]
    t0 = time.perf_counter()
    assert main(base + ["sweep", "noise"]) == 0
    assert main(base + ["sweep", "patch"]) == 0
    return {"out": out, "wall": time.perf_counter() - t0}


def read_csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def subject_labels(subj_dir) -> LabelMask:
    lab = read_nifti(subj_dir / "labels.nii")
    return LabelMask(np.rint(lab.data).astype(np.int16), lab.spacing)


# ---------------------------------------------------------------------------
# Criterion 1: closed-form steady state vs 200-period explicit iteration.


def test_criterion_01_forward_model_oracle():
    params = protocol()
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        t1 = rng.uniform(0.3, 5.0)
        b1 = rng.uniform(0.5, 1.5)
        ref = iterate_gre_signals(params, t1, b1, periods=200)
        got = simulate_gre_signals(params, t1, b1)
        worst = max(worst, float(np.max(np.abs(got - ref) / np.abs(ref))))
    wall = time.perf_counter() - t0
    ok = worst <= 1e-10 and wall < 5.0
    report(1, ok, f"max relative error {worst:.2e} over 50 draws "
                  f"(tol 1e-10), {wall:.2f} s (< 5 s)")


# ---------------------------------------------------------------------------
# Criterion 2: combined-image bound and gauge invariance, 1e5 pairs.


def test_criterion_02_bound_and_gauge_invariance():
    rng = np.random.default_rng(202)
    n = 100_000
    t0 = time.perf_counter()
    a = rng.normal(size=n) + 1j * rng.normal(size=n)
    b = rng.normal(size=n) + 1j * rng.normal(size=n)
    s = combine_pair(a, b)
    finite = np.isfinite(s)
    max_abs = float(np.max(np.abs(s[finite])))
    c = (rng.uniform(0.1, 10.0, n)
         * np.exp(1j * rng.uniform(0.0, 2.0 * np.pi, n)))
    s_scaled = combine_pair(c * a, c * b)
    gauge_err = float(np.max(np.abs(s_scaled[finite] - s[finite])))
    wall = time.perf_counter() - t0
    ok = max_abs <= 0.5 and gauge_err <= 1e-12 and wall < 1.0
    report(2, ok, f"max |S| {max_abs:.17f} (<= 0.5), gauge deviation "
                  f"{gauge_err:.2e} (tol 1e-12), {wall:.2f} s (< 1 s)")


# ---------------------------------------------------------------------------
# Criterion 6: SIR closed form vs RK4 propagator oracle + fit recovery.


PAPER_SIR = SirModelParams(r1f=1.0 / 1.48, psr=0.15, kmf=10.0,
                           sf=-0.95, m_inf=1.0)


def two_pool_matrix(p: SirModelParams) -> np.ndarray:
    kfm = p.kmf * p.psr
    r1m = p.r1f if p.r1m is None else p.r1m
    return np.array([[-(p.r1f + kfm), p.kmf], [kfm, -(r1m + p.kmf)]])


def rk4_propagator(a: np.ndarray, t: float, n: int = 1 << 20) -> np.ndarray:
    """Propagator of dM/dt = A M over time t by n classical RK4 steps.

    For a constant matrix one RK4 step is the fixed degree-4 Taylor
    polynomial in hA, so the n-step result is that matrix raised to the
    n-th power (computed by binary powering)."""
    h = t / n
    ha = h * a
    step = (np.eye(2) + ha + ha @ ha / 2.0
            + ha @ ha @ ha / 6.0 + ha @ ha @ ha @ ha / 24.0)
    return np.linalg.matrix_power(step, n)


def rk4_sir_signal(p: SirModelParams, acq: SirAcquisition) -> np.ndarray:
    """Independent oracle: iterate each sample's repetition period
    (invert -> evolve ti -> read -> saturate -> evolve td) to its fixed
    point with RK4-integrated propagators."""
    a = two_pool_matrix(p)
    meq = np.array([1.0, p.psr])
    phi_td = rk4_propagator(a, acq.td)
    out = np.empty(len(acq.ti))
    for k, ti in enumerate(acq.ti):
        phi = rk4_propagator(a, ti)
        m = meq.copy()
        for _ in range(400):
            m = np.array([p.sf * m[0], acq.sm * m[1]])
            m = meq + phi @ (m - meq)
            m_read = m[0]
            m = np.array([0.0, m[1]])
            m = meq + phi_td @ (m - meq)
        out[k] = p.m_inf * m_read
    return out


def test_criterion_06_sir_closed_form_and_fit():
    rng = np.random.default_rng(606)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        p = SirModelParams(r1f=rng.uniform(0.3, 1.2),
                           psr=rng.uniform(0.05, 0.25),
                           kmf=rng.uniform(5.0, 30.0),
                           sf=rng.uniform(-1.0, -0.5),
                           m_inf=rng.uniform(0.5, 2.0))
        acq = SirAcquisition(ti=DEFAULT_TI, td=rng.uniform(0.0025, 3.0),
                             sm=rng.uniform(-1.0, 1.0))
        got = sir_signal(p, acq)
        ref = rk4_sir_signal(p, acq)
        rel = np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-12))
        worst = max(worst, float(rel))

    # monoexponential reduction: no exchange, perfect inversion, long td
    p_mono = SirModelParams(r1f=0.8, psr=0.0, kmf=0.0, sf=-1.0, m_inf=1.0)
    acq_mono = SirAcquisition(ti=DEFAULT_TI, td=1000.0, sm=0.5)
    mono = sir_signal(p_mono, acq_mono)
    expected = 1.0 - 2.0 * np.exp(-0.8 * np.asarray(DEFAULT_TI))
    mono_err = float(np.max(np.abs(mono - expected)))

    # noiseless fit recovery of r1f
    acq_fit = SirAcquisition(ti=DEFAULT_TI, td=2.5, sm=0.83)
    res = fit_sir(sir_signal(PAPER_SIR, acq_fit), acq_fit)
    r1f_err = abs(res.params.r1f - PAPER_SIR.r1f) / PAPER_SIR.r1f
    wall = time.perf_counter() - t0
    ok = (worst <= 1e-6 and mono_err <= 1e-12 and r1f_err < 0.005
          and wall < 60.0)
    report(6, ok, f"RK4 oracle max rel {worst:.2e} (tol 1e-6), "
                  f"monoexponential dev {mono_err:.2e}, noiseless r1f "
                  f"error {100 * r1f_err:.3f}% (< 0.5%), {wall:.1f} s (< 60 s)")


# ---------------------------------------------------------------------------
# Criterion 7: per-weight gradient check on the width-4 / 2-block network.


def test_criterion_07_gradient_check():
    cfg = NetworkConfig(patch_size=5, channels=1, width=4, blocks=2,
                        batch_size=8, seed=7)
    rng = np.random.default_rng(707)
    flat = init_weights(cfg)
    batch = rng.normal(1.5, 0.3, size=(8, 1, 5, 5))
    targets = rng.normal(1.5, 0.3, size=8)
    t0 = time.perf_counter()
    _, grad = backward(cfg, flat, batch, targets)
    h = 1e-6
    worst = 0.0
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = float(np.mean((forward(cfg, flat, batch) - targets) ** 2))
        flat[k] = orig - h
        dn = float(np.mean((forward(cfg, flat, batch) - targets) ** 2))
        flat[k] = orig
        fd = (up - dn) / (2 * h)
        worst = max(worst, abs(grad[k] - fd) / max(abs(fd), 1e-8))
    wall = time.perf_counter() - t0
    ok = worst <= 1e-4 and wall < 10.0
    report(7, ok, f"max per-weight relative error {worst:.2e} over "
                  f"{flat.size} weights (tol 1e-4), {wall:.1f} s (< 10 s)")


# ---------------------------------------------------------------------------
# Criterion 11: t-test vs independent incomplete-beta reference;
# bias-variance identity on computed TissueMetrics.


def test_criterion_11_statistics_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1111)
    worst_p = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 40))
        a = rng.normal(0.0, 1.0, n)
        b = rng.normal(rng.uniform(-0.5, 0.5), 1.0, n)
        res = paired_t_test(a, b)
        ref = betainc(res.df / 2.0, 0.5, res.df / (res.df + res.t**2))
        worst_p = max(worst_p, abs(res.p - ref))

    worst_id = 0.0
    dims = (8, 8, 4)
    for case in range(20):
        labels = np.zeros(dims, dtype=np.int16)
        labels[:3] = LABEL_WM
        labels[3:6] = LABEL_SGM
        labels[6:] = LABEL_CGM
        ref_vol = Volume3D(rng.uniform(1.0, 2.5, dims))
        pred = Volume3D(ref_vol.data + rng.normal(0.05, 0.1, dims))
        for m in tissue_metrics(pred, ref_vol, LabelMask(labels)).values():
            pop_var = m.sd_error**2 * (m.n - 1) / m.n
            worst_id = max(worst_id,
                           abs(m.rmse**2 - (m.mean_error**2 + pop_var)))
    wall = time.perf_counter() - t0
    ok = worst_p <= 1e-6 and worst_id <= 1e-10 and wall < 5.0
    report(11, ok, f"max |p - betainc reference| {worst_p:.2e} (tol 1e-6), "
                   f"max bias-variance residual {worst_id:.2e} (tol 1e-10), "
                   f"{wall:.1f} s (< 5 s)")


# ---------------------------------------------------------------------------
# Criterion 4: MAP vs lookup point estimate at near-zero noise.


def test_criterion_04_map_matches_point_estimate():
    params = protocol()
    spec = GridSpec(t1_bins=500, t1_max=5.0, s_bins=100, b1_grid=(1.0,),
                    observables=1)
    t0 = time.perf_counter()
    grid = run_monte_carlo(params, NoiseModel(sigma=1e-5, seed=404),
                           1_000_000, spec)
    post = posterior_from_counts(grid)
    table = build_lookup(params, 1.0)
    diffs = {}
    for t1 in (0.8, 1.5, 2.0):
        sig = simulate_gre_signals(params, t1, 1.0)
        s = combine_pair(sig[0], sig[1])
        obs = Volume3D(np.full((1, 1, 1), s))
        res = map_estimate(post, [obs], Volume3D(np.ones((1, 1, 1))))
        t1_map = float(res.t1_map.data[0, 0, 0])
        t1_lookup = invert_lookup(table, s).t1
        diffs[t1] = abs(t1_map - t1_lookup)
    wall = time.perf_counter() - t0
    worst = max(diffs.values())
    ok = worst <= 0.01 and wall < 60.0
    detail = ", ".join(f"T1={k}: |diff|={v:.4f} s" for k, v in diffs.items())
    report(4, ok, f"{detail} (tol 0.01 s), {wall:.1f} s (< 60 s)")


# ---------------------------------------------------------------------------
# Criterion 3: posterior normalization, flat-likelihood prior, overflow.


def test_criterion_03_posterior_normalization(cohort):
    grid = pgrd_read(cohort["out"] / "posterior_obs1.pgrd")
    post = posterior_from_counts(grid)
    spec = grid.spec
    worst = 0.0
    n_checked = 0
    for bi in range(len(spec.b1_grid)):
        for s in range(spec.s_bins):
            sl = post.slice(bi, s)
            if sl is None:
                continue
            worst = max(worst, abs(float(np.sum(sl) * spec.dt1) - 1.0))
            n_checked += 1

    flat_counts = [np.full((spec.t1_bins, spec.s_bins), 7, dtype=np.int64)]
    flat_spec = GridSpec(t1_bins=spec.t1_bins, t1_max=spec.t1_max,
                         s_bins=spec.s_bins, b1_grid=(1.0,), observables=1)
    flat = posterior_from_counts(PosteriorGrid(
        flat_spec, grid.params, NoiseModel(0.0), 7 * spec.s_bins, flat_counts))
    prior_exact = all(np.array_equal(flat.slice(0, s), flat.prior)
                      for s in range(spec.s_bins))

    mc_wall = cohort["times"]["montecarlo"]
    ok = (worst <= 1e-6 and prior_exact and grid.overflow == 0
          and mc_wall < 30.0)
    report(3, ok, f"max normalization error {worst:.2e} over {n_checked} "
                  f"slices (tol 1e-6), flat likelihood returns prior "
                  f"exactly: {prior_exact}, overflow {grid.overflow}, "
                  f"grid build {mc_wall:.1f} s (< 30 s at 1e6 trials)")


# ---------------------------------------------------------------------------
# Criterion 5: MAP-vs-point per-tissue relative values at sigma 0.005.


def test_criterion_05_map_vs_point_relative_values(cohort):
    out = cohort["out"]
    targets = {LABEL_CGM: 98.5, LABEL_SGM: 98.1, LABEL_WM: 97.4}
    per_tissue = defaultdict(list)
    for s in range(4):
        d = out / f"subject_{s:02d}"
        labels = subject_labels(d)
        m = read_nifti(d / "t1_map2.nii").data
        p = read_nifti(d / "t1_point.nii").data
        for lab in TISSUES:
            sel = labels.data == lab
            per_tissue[lab].append(
                100.0 * np.nanmean(m[sel]) / np.nanmean(p[sel]))
    rel = {lab: float(np.mean(v)) for lab, v in per_tissue.items()}
    errs = {lab: abs(rel[lab] - targets[lab]) for lab in TISSUES}
    wall = sum(cohort["times"][k] for k in
               ("phantom", "montecarlo", "fit_point", "fit_map2"))
    ok = max(errs.values()) <= 1.5 and wall < 600.0
    detail = ", ".join(
        f"{name} {rel[lab]:.2f}% (target {targets[lab]}%)"
        for lab, name in ((LABEL_CGM, "CGM"), (LABEL_SGM, "SGM"),
                          (LABEL_WM, "WM")))
    report(5, ok, f"{detail}, tolerance ±1.5 points; producing stages "
                  f"{wall:.0f} s (< 600 s)")


# ---------------------------------------------------------------------------
# Criterion 8: end-to-end calibration reproduction via LOO CV.


def load_cv_metrics(out):
    """{(fold, phase, label): (rmse, relative_value)} from cv_metrics.csv."""
    table = {}
    for row in read_csv_rows(out / "cv_metrics.csv"):
        key = (int(row["fold"]), row["phase"], int(row["label"]))
        table[key] = (float(row["rmse_s"]), float(row["relative_value_pct"]))
    return table


def test_criterion_08_calibration_reproduction(cohort):
    out = cohort["out"]
    table = load_cv_metrics(out)
    folds = sorted({k[0] for k in table})
    assert folds == [0, 1, 2, 3]

    problems = []
    # (a) pre-calibration relative values within ±2 points of the bias
    pre_rel = {}
    for lab in TISSUES:
        vals = [table[(f, "pre", lab)][1] for f in folds]
        pre_rel[lab] = float(np.mean(vals))
        if abs(pre_rel[lab] - 100.0 * DEFAULT_BIAS[lab]) > 2.0:
            problems.append(f"pre relative {pre_rel[lab]:.2f}% vs bias "
                            f"{100 * DEFAULT_BIAS[lab]:.1f}% (label {lab})")
    # (b) post-calibration relative values within 100 ± 3%
    post_rel = {}
    for lab in TISSUES:
        vals = [table[(f, "post", lab)][1] for f in folds]
        post_rel[lab] = float(np.mean(vals))
        if abs(post_rel[lab] - 100.0) > 3.0:
            problems.append(f"post relative {post_rel[lab]:.2f}% (label {lab})")
    # (c) post/pre RMSE ratio < 0.6 per tissue per fold
    worst_ratio = 0.0
    for lab in TISSUES:
        for f in folds:
            ratio = table[(f, "post", lab)][0] / table[(f, "pre", lab)][0]
            worst_ratio = max(worst_ratio, ratio)
            if ratio >= 0.6:
                problems.append(f"fold {f} label {lab} post/pre RMSE "
                                f"ratio {ratio:.2f}")
    # (d) paired t-test pre vs post significant for every tissue
    ttest = {int(r["label"]): r for r in read_csv_rows(out / "cv_ttest.csv")}
    for lab in TISSUES:
        if int(ttest[lab]["significant"]) != 1:
            problems.append(f"t-test not significant for label {lab} "
                            f"(p={ttest[lab]['p']})")

    wall = sum(cohort["times"].values())
    if wall >= 1800.0:
        problems.append(f"pipeline took {wall:.0f} s (budget 1800 s)")
    ok = not problems
    detail = (f"pre rel {[f'{pre_rel[l]:.1f}' for l in TISSUES]}%, "
              f"post rel {[f'{post_rel[l]:.1f}' for l in TISSUES]}%, "
              f"worst post/pre ratio {worst_ratio:.2f} (< 0.6), t-tests "
              f"significant, pipeline {wall:.0f} s (< 1800 s)")
    report(8, ok, detail if ok else "; ".join(problems))


# ---------------------------------------------------------------------------
# Criterion 9: adding the sigma_T1 input channel is a null result.


def test_criterion_09_uncertainty_channel_null_result(cohort):
    from qt1map.cli import _subject_maps

    out = cohort["out"]
    table = load_cv_metrics(out)
    # per-tissue across-fold mean and sd of the 1-channel post RMSE
    # (the quantities cross_validate reports)
    mean_1ch = {lab: float(np.mean([table[(f, "post", lab)][0]
                                    for f in range(4)]))
                for lab in TISSUES}
    sd_1ch = {lab: float(np.std([table[(f, "post", lab)][0]
                                 for f in range(4)], ddof=1))
              for lab in TISSUES}

    # retrain fold 0 (test 0, val 1, train 2+3) with the 2-channel input
    subs = {i: _subject_maps("map2", out / f"subject_{i:02d}", True)
            for i in range(4)}
    # mirror the criterion-8 network except for the added input channel
    net = NetworkConfig(patch_size=5, channels=2, width=16, blocks=4,
                        learning_rate=3e-3, batch_size=256, max_steps=2000,
                        val_interval=50, patience=2000, seed=1234)

    def ds(i):
        s = subs[i]
        return extract_patches(s.t1_map, s.sigma_map, s.labels, s.t1_ref,
                               net.patch_size, net.channels, i)

    model = train(concat_datasets([ds(2), ds(3)]), ds(1), net, val_cap=2000)
    cal = predict_map(model, subs[0].t1_map, subs[0].sigma_map, subs[0].labels)
    post = tissue_metrics(cal, subs[0].t1_ref, subs[0].labels)
    # the 2-channel post RMSE must sit within one across-fold sd of the
    # 1-channel mean, per tissue
    parts = []
    ok = True
    for lab in TISSUES:
        delta = abs(post[lab].rmse - mean_1ch[lab])
        ok &= delta < sd_1ch[lab]
        parts.append(f"label {lab}: |delta| {delta:.4f} vs sd {sd_1ch[lab]:.4f}")
    report(9, ok, "2-channel vs 1-channel post RMSE [s] — " + "; ".join(parts))


# ---------------------------------------------------------------------------
# Criterion 12: NIfTI round trip bit-exact; pipeline rerun byte-identical.


def _hash_dir(d):
    out = {}
    for p in sorted(d.iterdir()):
        if p.name.startswith("run_"):  # run records carry wall times
            continue
        out[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def test_criterion_12_io_and_determinism(cohort, tmp_path):
    rng = np.random.default_rng(1212)
    vol = Volume3D(rng.normal(size=(7, 6, 5)), spacing=(1.0, 1.5, 2.0))
    cvol = ComplexVolume3D(rng.normal(size=(5, 4, 3))
                           + 1j * rng.normal(size=(5, 4, 3)))
    bit_exact = True
    for v, name in ((vol, "real"), (cvol, "cplx")):
        p1 = tmp_path / f"{name}_1.nii"
        p2 = tmp_path / f"{name}_2.nii"
        write_nifti(v, p1)
        write_nifti(read_nifti(p1), p2)
        bit_exact &= p1.read_bytes() == p2.read_bytes()
        back = read_nifti(p2)
        bit_exact &= np.array_equal(back.data, read_nifti(p1).data)

    out = cohort["out"]
    subj = out / "subject_00"
    before_subj = _hash_dir(subj)
    before_grid = hashlib.sha256(
        (out / "posterior_obs1.pgrd").read_bytes()).hexdigest()
    base = cohort["base"]
    assert main(base + ["phantom"]) == 0
    assert main(base + ["montecarlo"]) == 0
    assert main(base + ["fit", "--method", "map2", "--subject", "0"]) == 0
    after_subj = _hash_dir(subj)
    after_grid = hashlib.sha256(
        (out / "posterior_obs1.pgrd").read_bytes()).hexdigest()
    changed = sorted(k for k in before_subj
                     if after_subj.get(k) != before_subj[k])
    rerun_identical = not changed and after_grid == before_grid
    ok = bit_exact and rerun_identical
    report(12, ok, f"NIfTI round trip bit-exact: {bit_exact}; rerun of "
                   f"phantom/montecarlo/fit byte-identical: {rerun_identical}"
                   + (f" (changed: {changed})" if changed else ""))


# ---------------------------------------------------------------------------
# Criterion 10: sweep trends (noise and patch size).


def test_criterion_10_sweep_trends(sweeps):
    out = sweeps["out"]
    noise = defaultdict(dict)
    for row in read_csv_rows(out / "sweep_noise.csv"):
        noise[float(row["noise_sigma"])][int(row["label"])] = (
            float(row["rmse_pre_s"]), float(row["rmse_post_s"]))
    sigmas = sorted(noise)
    pre = [float(np.mean([noise[s][lab][0] for lab in TISSUES]))
           for s in sigmas]
    post = [float(np.mean([noise[s][lab][1] for lab in TISSUES]))
            for s in sigmas]
    increasing = all(b > a for a, b in zip(pre, pre[1:]))
    center = float(np.mean(post))
    band_ok = all(abs(v - center) <= 0.5 * center for v in post)

    patch = defaultdict(dict)
    for row in read_csv_rows(out / "sweep_patch.csv"):
        patch[int(row["patch_size"])][int(row["label"])] = (
            float(row["rmse_post_s"]))
    sizes = sorted(patch)
    post_by_p = {p: float(np.mean([patch[p][lab] for lab in TISSUES]))
                 for p in sizes}
    best_gt1 = min(v for p, v in post_by_p.items() if p > 1)
    p1_worse = post_by_p[1] > best_gt1

    wall = sweeps["wall"]
    ok = increasing and band_ok and p1_worse and wall < 2700.0
    report(10, ok,
           f"pre RMSE over sigma {['%.3f' % v for v in pre]} strictly "
           f"increasing: {increasing}; post RMSE {['%.3f' % v for v in post]} "
           f"within ±50% band: {band_ok}; patch post RMSE "
           f"{ {p: round(v, 3) for p, v in post_by_p.items()} }, P=1 worse "
           f"than best P>1: {p1_worse}; {wall:.0f} s (< 2700 s)")
