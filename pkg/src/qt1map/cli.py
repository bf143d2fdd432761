"""Command-line orchestrator.

Subcommands cover the whole pipeline: ``phantom`` (simulate a synthetic
cohort), ``montecarlo`` (build posterior grids), ``fit`` (T1 maps by
lookup point estimate, MAP posterior, or SIR fitting), ``calibrate``
(train / apply / cross-validate the residual network), ``sweep``
(parameter sweeps to CSV), ``analyze`` (per-subject comparison
statistics), and ``report`` (cohort summary table).

Exit codes: 0 success, 2 configuration error, 3 input error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
import time
from dataclasses import replace
from pathlib import Path

_OVERRIDE_RE = re.compile(r"^--([a-z_]+)\.([a-z_0-9]+)=(.*)$")


class InputError(Exception):
    """Missing or unusable input artifact (subject dir, grid, model)."""


# ---------------------------------------------------------------------------
# Small shared helpers.


def _subject_dirs(out: Path, only: int | None = None) -> list[Path]:
    if only is not None:
        d = out / f"subject_{only:02d}"
        if not d.is_dir():
            raise InputError(f"no such subject directory: {d}")
        return [d]
    dirs = sorted(out.glob("subject_[0-9][0-9]"))
    if not dirs:
        raise InputError(f"no subject directories under {out}; run 'qt1map phantom'")
    return dirs


def _subject_index(d: Path) -> int:
    return int(d.name.split("_")[1])


def _write_run_record(subj_dir: Path, method: str, parameters: dict,
                      wall: float, flags) -> None:
    import numpy as np

    vals, counts = np.unique(np.asarray(flags), return_counts=True)
    record = {
        "method": method,
        "parameters": parameters,
        "wall_time_s": round(float(wall), 3),
        "flag_counts": {str(int(v)): int(c) for v, c in zip(vals, counts)},
    }
    with open(subj_dir / f"run_{method}.json", "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sm_table(cfg, out: Path):
    """sech-inversion sm(b1) table, cached as CSV in the output dir."""
    from .sir import read_sm_table, sm_vs_b1_table, write_sm_table

    import numpy as np

    path = out / "sm_table.csv"
    if path.exists():
        return read_sm_table(path)
    lo = cfg.get_float("monte_carlo", "b1_lo")
    hi = cfg.get_float("monte_carlo", "b1_hi")
    n = cfg.get_int("monte_carlo", "b1_points")
    table = sm_vs_b1_table(np.linspace(lo, hi, n), cfg.sech_pulse())
    out.mkdir(parents=True, exist_ok=True)
    write_sm_table(path, table)
    return table


def _mc_sigma(cfg, out: Path) -> float:
    from .phantom import load_subject
    from .posterior import estimate_noise_sigma

    raw = cfg.raw("monte_carlo", "sigma")
    if raw != "auto":
        return cfg.get_float("monte_carlo", "sigma")
    subj_dir = out / "subject_00"
    if not subj_dir.is_dir():
        raise InputError(
            "monte_carlo.sigma=auto needs subject_00 for noise estimation; "
            "run 'qt1map phantom' first or set a numeric sigma"
        )
    subj = load_subject(subj_dir)
    return estimate_noise_sigma(list(subj.gres), subj.labels, subj.acq_params)


def _build_grid(cfg, observables: int, out: Path):
    from .config import derive_seed
    from .posterior import NoiseModel, pgrd_write, run_monte_carlo

    sigma = _mc_sigma(cfg, out)
    noise = NoiseModel(sigma=sigma, seed=derive_seed(cfg.seed, "montecarlo", observables))
    grid = run_monte_carlo(
        cfg.acquisition_params(), noise,
        cfg.get_int("monte_carlo", "trials"),
        cfg.grid_spec(observables),
    )
    out.mkdir(parents=True, exist_ok=True)
    pgrd_write(grid, out / f"posterior_obs{observables}.pgrd")
    return grid


def _load_grid(cfg, observables: int, out: Path):
    from .posterior import pgrd_read

    path = out / f"posterior_obs{observables}.pgrd"
    if path.exists():
        return pgrd_read(path)
    if cfg.get_bool("monte_carlo", "auto_build"):
        return _build_grid(cfg, observables, out)
    raise InputError(f"missing posterior grid {path}; run 'qt1map montecarlo'")


# ---------------------------------------------------------------------------
# Fitting primitives shared by `fit`, `sweep`, and `calibrate`.


def _fit_point(cfg, subj, subj_dir: Path) -> None:
    from .mp2rage import point_estimate_t1_map
    from .nifti import write_nifti

    t0 = time.perf_counter()
    t1, flags = point_estimate_t1_map(list(subj.gres), subj.acq_params, subj.b1_map)
    write_nifti(t1, subj_dir / "t1_point.nii")
    _write_run_record(subj_dir, "point",
                      {"gre_pair": [0, 1], "inv_eff": subj.acq_params.inv_eff},
                      time.perf_counter() - t0, flags)


def _fit_map(cfg, subj, subj_dir: Path, observables: int, out: Path, grid=None):
    from .mp2rage import combine_volumes
    from .nifti import write_nifti
    from .posterior import map_estimate, posterior_from_counts

    t0 = time.perf_counter()
    if grid is None:
        grid = _load_grid(cfg, observables, out)
    post = posterior_from_counts(grid)
    obs = [combine_volumes(subj.gres[i], subj.gres[j]) for i, j in grid.spec.pairs]
    res = map_estimate(post, obs, subj.b1_map)
    method = f"map{observables + 1}"  # number of GREs entering the estimate
    write_nifti(res.t1_map, subj_dir / f"t1_{method}.nii")
    write_nifti(res.sigma_t1_map, subj_dir / f"sigma_t1_{method}.nii")
    _write_run_record(subj_dir, method,
                      {"observables": observables, "trials": grid.trials,
                       "sigma": grid.noise.sigma},
                      time.perf_counter() - t0, res.flags)
    return res


def _fit_sir(cfg, subj, subj_dir: Path, out: Path) -> None:
    from .nifti import write_nifti
    from .sir import interp_sm, sir_t1_map
    from .volume import Volume3D

    t0 = time.perf_counter()
    table = _sm_table(cfg, out)
    sm_map = Volume3D(interp_sm(table, subj.b1_map.data), subj.b1_map.spacing)
    init, bounds, max_iter = cfg.sir_fit_settings()
    t1, flags = sir_t1_map(list(subj.sir_stack), subj.sir_acq, sm_map=sm_map,
                           mask=subj.labels.brain(), init=init, bounds=bounds,
                           max_iter=max_iter)
    write_nifti(t1, subj_dir / "t1_sir.nii")
    _write_run_record(subj_dir, "sir",
                      {"td": subj.sir_acq.td, "n_ti": len(subj.sir_acq.ti),
                       "max_iter": max_iter},
                      time.perf_counter() - t0, flags)


def _subject_maps(method: str, subj_dir: Path, with_sigma: bool):
    """Assemble the calibration inputs for one subject from fitted maps."""
    from .calib import SubjectMaps
    from .nifti import read_nifti
    from .volume import LabelMask

    import numpy as np

    t1_path = subj_dir / f"t1_{method}.nii"
    ref_path = subj_dir / "t1_sir.nii"
    for p in (t1_path, ref_path):
        if not p.exists():
            raise InputError(f"missing {p}; run 'qt1map fit' first")
    labels_f = read_nifti(subj_dir / "labels.nii")
    labels = LabelMask(np.rint(labels_f.data).astype(np.int16), labels_f.spacing)
    sigma = None
    sig_path = subj_dir / f"sigma_t1_{method}.nii"
    if with_sigma:
        if not sig_path.exists():
            raise InputError(f"missing {sig_path} (needed for the 2-channel network)")
        sigma = read_nifti(sig_path)
    return SubjectMaps(
        subject_id=_subject_index(subj_dir),
        t1_map=read_nifti(t1_path),
        sigma_map=sigma,
        labels=labels,
        t1_ref=read_nifti(ref_path),
    )


# ---------------------------------------------------------------------------
# Subcommands.


def cmd_phantom(cfg, args) -> int:
    from .config import derive_seed
    from .phantom import save_subject, simulate_subject

    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.phantom_spec()
    params = cfg.acquisition_params()
    acq = cfg.sir_acquisition()
    table = _sm_table(cfg, out)
    n = cfg.get_int("phantom", "subjects")
    for s in range(n):
        seed = derive_seed(cfg.seed, "phantom", s)
        subj = simulate_subject(spec, params, acq, seed, sm_table=table)
        save_subject(subj, out / f"subject_{s:02d}")
        print(f"subject_{s:02d}: dims={spec.dims} seed={seed}")
    return 0


def cmd_montecarlo(cfg, args) -> int:
    out = cfg.out_dir
    for k in cfg.get_ints("monte_carlo", "observables"):
        grid = _build_grid(cfg, k, out)
        print(f"posterior_obs{k}.pgrd: trials={grid.trials} "
              f"overflow={grid.overflow} invalid={grid.invalid}")
    return 0


def cmd_fit(cfg, args) -> int:
    from .phantom import load_subject

    out = cfg.out_dir
    for subj_dir in _subject_dirs(out, args.subject):
        subj = load_subject(subj_dir)
        if args.method == "point":
            _fit_point(cfg, subj, subj_dir)
        elif args.method in ("map2", "map3"):
            _fit_map(cfg, subj, subj_dir, 1 if args.method == "map2" else 2, out)
        else:
            _fit_sir(cfg, subj, subj_dir, out)
        print(f"{subj_dir.name}: t1_{args.method}.nii written")
    return 0


def cmd_calibrate(cfg, args) -> int:
    import csv

    import numpy as np

    from .calib import (concat_datasets, cross_validate, extract_patches,
                        load_model, predict_map, save_model, train,
                        write_training_curve_csv)
    from .nifti import write_nifti
    from .stats import paired_t_test, write_metrics_csv
    from .volume import LABEL_NAMES

    out = cfg.out_dir
    net = cfg.network_config()
    with_sigma = net.channels == 2

    if args.mode == "train":
        train_ids = args.train if args.train is not None else [2, 3]
        val_id = args.val if args.val is not None else 1
        subs = {i: _subject_maps(args.method, out / f"subject_{i:02d}", with_sigma)
                for i in set(train_ids) | {val_id}}

        def ds(i):
            s = subs[i]
            return extract_patches(s.t1_map, s.sigma_map, s.labels, s.t1_ref,
                                   net.patch_size, net.channels, i)

        model = train(concat_datasets([ds(i) for i in train_ids]), ds(val_id),
                      net, val_cap=cfg.val_cap)
        save_model(model, out / "model.calw")
        write_training_curve_csv(model, out / "training_curve.csv")
        print(f"model.calw: best_step={model.best_step}")
        return 0

    if args.mode == "apply":
        model_path = Path(args.model) if args.model else out / "model.calw"
        if not model_path.exists():
            raise InputError(f"missing model file: {model_path}")
        model = load_model(model_path)
        for subj_dir in _subject_dirs(out, args.subject):
            s = _subject_maps(args.method, subj_dir,
                              model.config.channels == 2)
            t0 = time.perf_counter()
            cal = predict_map(model, s.t1_map, s.sigma_map, s.labels)
            write_nifti(cal, subj_dir / "t1_calibrated.nii")
            _write_run_record(subj_dir, "calibrated",
                              {"model": str(model_path),
                               "patch_size": model.config.patch_size},
                              time.perf_counter() - t0,
                              np.isfinite(cal.data).astype(np.uint8))
            print(f"{subj_dir.name}: t1_calibrated.nii written")
        return 0

    # mode == "cv": leave-one-out over the 4-subject cohort
    dirs = _subject_dirs(out)
    if len(dirs) != 4:
        raise InputError(f"cross-validation needs exactly 4 subjects, found {len(dirs)}")
    subjects = [_subject_maps(args.method, d, with_sigma) for d in dirs]
    results = cross_validate(subjects, net, val_cap=cfg.val_cap)

    rows = []  # per-fold per-tissue table rows
    pre_rmse: dict[int, list[float]] = {}
    post_rmse: dict[int, list[float]] = {}
    means: dict[tuple[str, int], list[float]] = {}
    for r in results:
        save_model(r.model, out / f"fold{r.fold}_model.calw")
        write_metrics_csv(out / f"fold{r.fold}_pre_metrics.csv", r.pre)
        write_metrics_csv(out / f"fold{r.fold}_post_metrics.csv", r.post)
        test = subjects[r.test_subject]
        cal = predict_map(r.model, test.t1_map, test.sigma_map, test.labels)
        for label in sorted(r.pre):
            sel = test.labels.data == label
            for name, vol in (("sir_reference", test.t1_ref),
                              ("map_pre", test.t1_map), ("map_post", cal)):
                v = vol.data[sel]
                means.setdefault((name, label), []).append(float(np.nanmean(v)))
            pre_rmse.setdefault(label, []).append(r.pre[label].rmse)
            post_rmse.setdefault(label, []).append(r.post[label].rmse)
            for phase, m in (("pre", r.pre[label]), ("post", r.post[label])):
                rows.append([r.fold, phase, label, LABEL_NAMES[label], m.n,
                             f"{m.rmse:.9g}", f"{m.relative_value:.9g}"])

    with open(out / "cv_metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "phase", "label", "tissue", "n",
                    "rmse_s", "relative_value_pct"])
        w.writerows(rows)

    alpha = cfg.get_float("analysis", "alpha")
    with open(out / "cv_table1.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "label", "tissue", "mean_t1_s", "sd_t1_s",
                    "mean_rmse_s", "sd_rmse_s"])
        for name in ("sir_reference", "map_pre", "map_post"):
            for label in sorted(LABEL_NAMES):
                if (name, label) not in means:
                    continue
                vals = means[(name, label)]
                rms = {"sir_reference": None, "map_pre": pre_rmse,
                       "map_post": post_rmse}[name]
                rvals = rms.get(label, []) if rms is not None else []
                w.writerow([
                    name, label, LABEL_NAMES[label],
                    f"{np.mean(vals):.9g}",
                    f"{np.std(vals, ddof=1):.9g}" if len(vals) > 1 else "0",
                    f"{np.mean(rvals):.9g}" if rvals else "",
                    (f"{np.std(rvals, ddof=1):.9g}" if len(rvals) > 1 else "0")
                    if rvals else "",
                ])

    with open(out / "cv_ttest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "tissue", "t", "df", "p", "significant", "alpha"])
        for label in sorted(pre_rmse):
            tt = paired_t_test(pre_rmse[label], post_rmse[label], alpha=alpha)
            w.writerow([label, LABEL_NAMES[label], f"{tt.t:.9g}", tt.df,
                        f"{tt.p:.9g}", int(tt.significant), alpha])
    print("cv_metrics.csv, cv_table1.csv, cv_ttest.csv written")
    return 0


def cmd_analyze(cfg, args) -> int:
    import numpy as np

    from .nifti import read_nifti
    from .stats import (bland_altman_table, plausibility_check, tissue_metrics,
                        write_bland_altman_csv, write_metrics_csv)
    from .volume import LABEL_NAMES, LabelMask

    out = cfg.out_dir
    ref_kind = cfg.raw("analysis", "reference")
    for subj_dir in _subject_dirs(out, args.subject):
        labels_f = read_nifti(subj_dir / "labels.nii")
        labels = LabelMask(np.rint(labels_f.data).astype(np.int16), labels_f.spacing)
        ref_name = "t1_sir.nii" if ref_kind == "sir" else "t1_truth.nii"
        ref_path = subj_dir / ref_name
        if not ref_path.exists():
            raise InputError(f"missing reference map {ref_path}")
        ref = read_nifti(ref_path)
        found = []
        for method in ("point", "map2", "map3", "calibrated"):
            path = subj_dir / f"t1_{method}.nii"
            if not path.exists():
                continue
            pred = read_nifti(path)
            metrics = tissue_metrics(pred, ref, labels)
            write_metrics_csv(subj_dir / f"metrics_{method}.csv", metrics)
            rows, summaries = bland_altman_table(pred, ref, labels)
            write_bland_altman_csv(subj_dir / f"bland_altman_{method}.csv",
                                   rows, summaries)
            tissue_means = {
                lab: float(np.nanmean(pred.data[labels.data == lab]))
                for lab in sorted(LABEL_NAMES)
                if np.any(labels.data == lab)
            }
            plaus = plausibility_check(tissue_means)
            import csv

            with open(subj_dir / f"plausibility_{method}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["label", "tissue", "mean_t1_s", "range_low_s",
                            "range_high_s", "passed"])
                for lab, p in sorted(plaus.items()):
                    w.writerow([lab, p.name, f"{p.mean:.9g}",
                                p.range_low, p.range_high, int(p.passed)])
            found.append(method)
        if not found:
            raise InputError(f"no fitted maps in {subj_dir}; run 'qt1map fit'")
        print(f"{subj_dir.name}: analyzed {', '.join(found)}")
    return 0


def cmd_report(cfg, args) -> int:
    import csv

    import numpy as np

    from .nifti import read_nifti
    from .stats import tissue_metrics
    from .volume import LABEL_NAMES, LabelMask

    out = cfg.out_dir
    ref_kind = cfg.raw("analysis", "reference")
    ref_name = "t1_sir.nii" if ref_kind == "sir" else "t1_truth.nii"
    agg: dict[tuple[str, int], dict[str, list[float]]] = {}
    for subj_dir in _subject_dirs(out):
        labels_f = read_nifti(subj_dir / "labels.nii")
        labels = LabelMask(np.rint(labels_f.data).astype(np.int16), labels_f.spacing)
        ref_path = subj_dir / ref_name
        if not ref_path.exists():
            raise InputError(f"missing reference map {ref_path}")
        ref = read_nifti(ref_path)
        maps = {"sir_reference": ref}
        for method in ("point", "map2", "map3", "calibrated"):
            path = subj_dir / f"t1_{method}.nii"
            if path.exists():
                maps[method] = read_nifti(path)
        for name, vol in maps.items():
            metrics = tissue_metrics(vol, ref, labels) if name != "sir_reference" else None
            for lab in sorted(LABEL_NAMES):
                sel = labels.data == lab
                if not np.any(sel):
                    continue
                cell = agg.setdefault((name, lab), {"mean": [], "rmse": [], "rel": []})
                cell["mean"].append(float(np.nanmean(vol.data[sel])))
                if metrics is not None and lab in metrics:
                    cell["rmse"].append(metrics[lab].rmse)
                    cell["rel"].append(metrics[lab].relative_value)
    path = out / "report_table1.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "label", "tissue", "mean_t1_s", "sd_t1_s",
                    "mean_rmse_s", "mean_relative_value_pct"])
        order = ["sir_reference", "point", "map2", "map3", "calibrated"]
        for name in order:
            for lab in sorted(LABEL_NAMES):
                if (name, lab) not in agg:
                    continue
                c = agg[(name, lab)]
                w.writerow([
                    name, lab, LABEL_NAMES[lab],
                    f"{np.mean(c['mean']):.9g}",
                    f"{np.std(c['mean'], ddof=1):.9g}" if len(c["mean"]) > 1 else "0",
                    f"{np.mean(c['rmse']):.9g}" if c["rmse"] else "",
                    f"{np.mean(c['rel']):.9g}" if c["rel"] else "",
                ])
    print(f"{path} written")
    return 0


# ---------------------------------------------------------------------------
# Sweeps.


def _lookup_sweep_rows(params_list, key_vals, b1_factors=None):
    """Lookup curves for each (key value, params, b1) combination."""
    from .mp2rage import build_lookup

    rows = []
    for val, params, b1 in zip(key_vals, params_list,
                               b1_factors or [1.0] * len(key_vals)):
        table = build_lookup(params, b1)
        for t1, s in zip(table.branch_t1, table.branch_s):
            rows.append((val, t1, s))
    return rows


def _write_rows(path: Path, header, rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in row])


def _single_fold(cfg, subjects, net):
    """Train on subjects 2+3, validate on 1, evaluate on 0 (fold 0)."""
    from .calib import concat_datasets, extract_patches, predict_map, train
    from .stats import tissue_metrics

    def ds(s):
        return extract_patches(s.t1_map, s.sigma_map, s.labels, s.t1_ref,
                               net.patch_size, net.channels, s.subject_id)

    model = train(concat_datasets([ds(subjects[2]), ds(subjects[3])]),
                  ds(subjects[1]), net, val_cap=cfg.val_cap)
    test = subjects[0]
    cal = predict_map(model, test.t1_map, test.sigma_map, test.labels)
    pre = tissue_metrics(test.t1_map, test.t1_ref, test.labels)
    post = tissue_metrics(cal, test.t1_ref, test.labels)
    return pre, post


def _simulate_cohort_maps(cfg, noise_sigma: float, stage: str, index: int,
                          out: Path):
    """Simulate 4 subjects at the given GRE noise level and produce their
    MAP and SIR maps in memory (nothing written except the cached grids)."""
    from .calib import SubjectMaps
    from .config import derive_seed
    from .mp2rage import combine_volumes
    from .phantom import simulate_subject
    from .posterior import (NoiseModel, map_estimate, posterior_from_counts,
                            run_monte_carlo)
    from .sir import interp_sm, sir_t1_map
    from .volume import Volume3D

    spec = replace(cfg.phantom_spec(), noise_sigma=noise_sigma)
    params = cfg.acquisition_params()
    acq = cfg.sir_acquisition()
    table = _sm_table(cfg, out)
    noise = NoiseModel(sigma=noise_sigma,
                       seed=derive_seed(cfg.seed, f"{stage}-mc", index))
    grid = run_monte_carlo(params, noise, cfg.get_int("monte_carlo", "trials"),
                           cfg.grid_spec(1))
    post = posterior_from_counts(grid)
    init, bounds, max_iter = cfg.sir_fit_settings()
    subjects = []
    for s in range(4):
        seed = derive_seed(cfg.seed, stage, index * 16 + s)
        subj = simulate_subject(spec, params, acq, seed, sm_table=table)
        obs = [combine_volumes(subj.gres[i], subj.gres[j])
               for i, j in grid.spec.pairs]
        res = map_estimate(post, obs, subj.b1_map)
        sm_map = Volume3D(interp_sm(table, subj.b1_map.data), subj.b1_map.spacing)
        t1_sir, _ = sir_t1_map(list(subj.sir_stack), subj.sir_acq, sm_map=sm_map,
                               mask=subj.labels.brain(), init=init,
                               bounds=bounds, max_iter=max_iter)
        subjects.append(SubjectMaps(
            subject_id=s, t1_map=res.t1_map, sigma_map=res.sigma_t1_map,
            labels=subj.labels, t1_ref=t1_sir,
        ))
    return subjects


def cmd_sweep(cfg, args) -> int:
    from .volume import LABEL_NAMES

    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    params = cfg.acquisition_params()
    steps = cfg.get_int("sweep", "max_steps")

    if args.axis == "b1":
        vals = cfg.get_floats("sweep", "b1_factors")
        rows = _lookup_sweep_rows([params] * len(vals), vals, list(vals))
        _write_rows(out / "sweep_b1.csv", ["b1_factor", "t1_seconds", "s_value"], rows)
        print(f"sweep_b1.csv: {len(vals)} curves")
        return 0

    if args.axis == "inv_eff":
        vals = cfg.get_floats("sweep", "inv_effs")
        plist = [replace(params, inv_eff=v) for v in vals]
        rows = _lookup_sweep_rows(plist, vals)
        _write_rows(out / "sweep_inv_eff.csv",
                    ["inv_eff", "t1_seconds", "s_value"], rows)
        print(f"sweep_inv_eff.csv: {len(vals)} curves")
        return 0

    if args.axis == "acq_params":
        vals = cfg.get_floats("sweep", "acq_param_scale")
        plist = [replace(params, mp2rage_tr=params.mp2rage_tr * v,
                         ti=tuple(t * v for t in params.ti)) for v in vals]
        rows = _lookup_sweep_rows(plist, vals)
        _write_rows(out / "sweep_acq_params.csv",
                    ["time_scale", "t1_seconds", "s_value"], rows)
        print(f"sweep_acq_params.csv: {len(vals)} curves")
        return 0

    if args.axis == "noise":
        sigmas = cfg.get_floats("sweep", "noise_sigmas")
        net = cfg.network_config(max_steps=steps)
        rows = []
        for i, sigma in enumerate(sigmas):
            subjects = _simulate_cohort_maps(cfg, sigma, "sweep-noise", i, out)
            pre, post = _single_fold(cfg, subjects, net)
            for label in sorted(pre):
                rows.append((sigma, label, LABEL_NAMES[label],
                             pre[label].rmse, post[label].rmse,
                             pre[label].relative_value,
                             post[label].relative_value))
            print(f"noise sigma={sigma}: done")
        _write_rows(out / "sweep_noise.csv",
                    ["noise_sigma", "label", "tissue", "rmse_pre_s",
                     "rmse_post_s", "rel_pre_pct", "rel_post_pct"], rows)
        return 0

    # axis == "patch": one cohort, retrain per patch size
    sizes = cfg.get_ints("sweep", "patch_sizes")
    sigma = cfg.get_float("phantom", "noise_sigma")
    subjects = _simulate_cohort_maps(cfg, sigma, "sweep-patch", 0, out)
    rows = []
    for p in sizes:
        net = cfg.network_config(patch_size=p, max_steps=steps)
        pre, post = _single_fold(cfg, subjects, net)
        for label in sorted(pre):
            rows.append((p, label, LABEL_NAMES[label],
                         pre[label].rmse, post[label].rmse,
                         post[label].relative_value))
        print(f"patch size={p}: done")
    _write_rows(out / "sweep_patch.csv",
                ["patch_size", "label", "tissue", "rmse_pre_s",
                 "rmse_post_s", "rel_post_pct"], rows)
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and dispatch.


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="qt1map",
        description="Quantitative T1 mapping: simulation, estimation, "
                    "calibration, and analysis.",
        epilog="Any option of the form --section.key=value overrides the "
               "matching configuration entry.",
    )
    p.add_argument("--config", default=None,
                   help="configuration file (default: $QT1MAP_CONFIG if set)")
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS/compiled-kernel threads")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("phantom", help="simulate the synthetic cohort")
    sub.add_parser("montecarlo", help="build Monte Carlo posterior grids")

    fit = sub.add_parser("fit", help="estimate T1 maps")
    fit.add_argument("--method", required=True,
                     choices=["point", "map2", "map3", "sir"])
    fit.add_argument("--subject", type=int, default=None,
                     help="subject index (default: all)")

    cal = sub.add_parser("calibrate", help="residual-network calibration")
    cal.add_argument("mode", choices=["train", "apply", "cv"])
    cal.add_argument("--method", default="map2", choices=["point", "map2", "map3"],
                     help="which T1 map to calibrate (default map2)")
    cal.add_argument("--train", type=int, nargs="+", default=None,
                     help="training subject indices (train mode)")
    cal.add_argument("--val", type=int, default=None,
                     help="validation subject index (train mode)")
    cal.add_argument("--model", default=None,
                     help="model file to apply (apply mode)")
    cal.add_argument("--subject", type=int, default=None,
                     help="subject index for apply (default: all)")

    sw = sub.add_parser("sweep", help="parameter sweeps to CSV")
    sw.add_argument("axis", choices=["noise", "patch", "b1", "inv_eff",
                                     "acq_params"])

    an = sub.add_parser("analyze", help="per-subject comparison statistics")
    an.add_argument("--subject", type=int, default=None)

    sub.add_parser("report", help="cohort summary table")
    return p


_COMMANDS = {
    "phantom": cmd_phantom,
    "montecarlo": cmd_montecarlo,
    "fit": cmd_fit,
    "calibrate": cmd_calibrate,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)

    # Thread caps must land in the environment before numpy/BLAS load.
    for i, a in enumerate(argv):
        n = None
        if a == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif a.startswith("--threads="):
            n = a.split("=", 1)[1]
        if n is not None and n.isdigit():
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                        "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
                os.environ.setdefault(var, n)
            break

    parser = _build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2

    overrides = []
    for item in extra:
        if not _OVERRIDE_RE.match(item):
            print(f"error: unrecognized argument {item!r} "
                  "(overrides look like --section.key=value)", file=sys.stderr)
            return 2
        overrides.append(item.lstrip("-"))

    from .calib import TrainingDivergedError
    from .config import ConfigError, RunConfig
    from .nifti import NiftiError

    try:
        cfg = RunConfig.load(args.config, overrides)
        return _COMMANDS[args.command](cfg, args)
    except (InputError, FileNotFoundError, NiftiError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return 3
    except (TrainingDivergedError, ArithmeticError, RuntimeError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4
    except (ConfigError, ValueError) as e:
        # parameter validation raises ValueError subclasses throughout
        print(f"configuration error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
