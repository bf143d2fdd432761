"""Comparison statistics: per-tissue RMSE / relative value, Bland-Altman
tables, paired t-tests, and literature plausibility range checks."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import betainc

from .volume import LABEL_CGM, LABEL_NAMES, LABEL_SGM, LABEL_WM, LabelMask, Volume3D

# 7T literature T1 ranges (seconds)
WM_RANGE = (1.12, 1.58)
GM_RANGE = (1.23, 1.73)


@dataclass(frozen=True)
class TissueMetrics:
    """Error statistics of pred vs ref over one tissue's valid voxels."""

    label: int
    n: int
    rmse: float  # seconds
    relative_value: float  # percent, 100 * mean(pred)/mean(ref)
    mean_error: float  # seconds
    sd_error: float  # seconds, sample (n-1) convention
    loa_low: float  # mean_error - 1.96 * sd_error
    loa_high: float  # mean_error + 1.96 * sd_error

    @property
    def name(self) -> str:
        return LABEL_NAMES.get(self.label, str(self.label))


def _valid_pairs(pred: Volume3D, ref: Volume3D, labels: LabelMask, label: int):
    if pred.dims != ref.dims or pred.dims != labels.dims:
        raise ValueError("pred, ref, and labels must share one grid")
    sel = (labels.data == label) & np.isfinite(pred.data) & np.isfinite(ref.data)
    return pred.data[sel], ref.data[sel]


def tissue_metrics(
    pred: Volume3D, ref: Volume3D, labels: LabelMask
) -> dict[int, TissueMetrics]:
    """Per-tissue metrics; NaN voxels excluded pairwise; tissues with no
    valid voxels are absent from the result."""
    out: dict[int, TissueMetrics] = {}
    for label in sorted(LABEL_NAMES):
        p, r = _valid_pairs(pred, ref, labels, label)
        n = p.size
        if n == 0:
            continue
        err = p - r
        mean_err = float(np.mean(err))
        sd_err = float(np.std(err, ddof=1)) if n > 1 else 0.0
        rmse = float(np.sqrt(np.mean(err**2)))
        ref_mean = float(np.mean(r))
        if ref_mean == 0:
            raise ValueError(f"reference mean is zero for label {label}")
        out[label] = TissueMetrics(
            label=label,
            n=n,
            rmse=rmse,
            relative_value=100.0 * float(np.mean(p)) / ref_mean,
            mean_error=mean_err,
            sd_error=sd_err,
            loa_low=mean_err - 1.96 * sd_err,
            loa_high=mean_err + 1.96 * sd_err,
        )
    return out


def bland_altman_table(
    pred: Volume3D, ref: Volume3D, labels: LabelMask
) -> tuple[np.ndarray, dict[int, TissueMetrics]]:
    """Raw scatter pairs plus per-tissue summary lines.

    Returns (rows, summaries): rows is an (N, 3) array of
    (label, ref_t1, error) and summaries the matching TissueMetrics.
    """
    summaries = tissue_metrics(pred, ref, labels)
    chunks = []
    for label in sorted(summaries):
        p, r = _valid_pairs(pred, ref, labels, label)
        chunks.append(np.column_stack([np.full(p.size, label, dtype=np.float64), r, p - r]))
    rows = np.concatenate(chunks, axis=0) if chunks else np.empty((0, 3))
    return rows, summaries


def write_bland_altman_csv(path: str | Path, rows: np.ndarray,
                           summaries: dict[int, TissueMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "ref_t1_s", "error_s"])
        for label, r, e in rows:
            w.writerow([int(label), f"{r:.9g}", f"{e:.9g}"])
        w.writerow([])
        w.writerow(["label", "n", "mean_error_s", "sd_error_s", "loa_low_s", "loa_high_s"])
        for label, m in sorted(summaries.items()):
            w.writerow([label, m.n, f"{m.mean_error:.9g}", f"{m.sd_error:.9g}",
                        f"{m.loa_low:.9g}", f"{m.loa_high:.9g}"])


def write_metrics_csv(path: str | Path, metrics: dict[int, TissueMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "tissue", "n", "rmse_s", "relative_value_pct",
                    "mean_error_s", "sd_error_s", "loa_low_s", "loa_high_s"])
        for label, m in sorted(metrics.items()):
            w.writerow([label, m.name, m.n, f"{m.rmse:.9g}", f"{m.relative_value:.9g}",
                        f"{m.mean_error:.9g}", f"{m.sd_error:.9g}",
                        f"{m.loa_low:.9g}", f"{m.loa_high:.9g}"])


# ---------------------------------------------------------------------------
# Paired t-test.


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float
    significant: bool
    alpha: float


class DegenerateTTestError(ValueError):
    """All paired differences are exactly zero: t is 0/0."""


def t_sf(t: float, df: int) -> float:
    """P(T > t) for Student's t with df degrees of freedom, via the
    regularized incomplete beta function."""
    x = df / (df + t * t)
    tail = 0.5 * betainc(df / 2.0, 0.5, x)
    return tail if t >= 0 else 1.0 - tail


def paired_t_test(a, b, alpha: float = 0.05) -> TTestResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired t-test needs two equal-length 1D vectors")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = float(np.mean(d))
    sd = float(np.std(d, ddof=1))
    df = n - 1
    if sd == 0.0:
        if mean == 0.0:
            raise DegenerateTTestError("all paired differences are zero")
        return TTestResult(t=np.inf if mean > 0 else -np.inf, df=df,
                           p=0.0, significant=True, alpha=alpha)
    t = mean / (sd / np.sqrt(n))
    p = 2.0 * t_sf(abs(t), df)
    return TTestResult(t=float(t), df=df, p=float(p),
                       significant=bool(p < alpha), alpha=alpha)


# ---------------------------------------------------------------------------
# Plausibility ranges.


@dataclass(frozen=True)
class PlausibilityResult:
    label: int
    mean: float
    sd: float
    range_low: float
    range_high: float
    passed: bool

    @property
    def name(self) -> str:
        return LABEL_NAMES.get(self.label, str(self.label))


def plausibility_check(
    tissue_means: dict[int, float],
    tissue_sds: dict[int, float] | None = None,
) -> dict[int, PlausibilityResult]:
    """Overlap test of each tissue's mean +- sd interval against the 7T
    literature ranges (WM vs WM_RANGE, both gray-matter labels vs
    GM_RANGE). sd defaults to 0, reducing to containment of the mean."""
    ranges = {LABEL_WM: WM_RANGE, LABEL_SGM: GM_RANGE, LABEL_CGM: GM_RANGE}
    out: dict[int, PlausibilityResult] = {}
    for label, mean in sorted(tissue_means.items()):
        if label not in ranges:
            raise ValueError(f"no literature range for label {label}")
        sd = 0.0 if tissue_sds is None else float(tissue_sds.get(label, 0.0))
        if not np.isfinite(mean) or not np.isfinite(sd):
            raise ValueError(f"non-finite mean/sd for label {label}")
        lo, hi = ranges[label]
        passed = (mean + sd >= lo) and (mean - sd <= hi)
        out[label] = PlausibilityResult(label, float(mean), sd, lo, hi, bool(passed))
    return out
