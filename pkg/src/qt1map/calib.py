"""Patch-based residual calibration network.

Maps P x P in-plane patches of MAP MP2RAGE T1 (optional sigma_T1 second
channel) to the reference SIR T1 of the center voxel. Compact residual
architecture: 3x3 stem convolution, width-preserving residual blocks,
global average pool, scalar affine head. Gradients come from the
in-house reverse-mode engine (:mod:`qt1map.autodiff`); optimization is
Adam. Trained models serialize to a "CALW" binary container.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .stats import TissueMetrics, tissue_metrics
from .volume import LabelMask, Volume3D

ALLOWED_PATCH_SIZES = (1, 5, 9, 13)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, log: list):
        self.step = step
        self.log = log
        super().__init__(f"training loss became non-finite at step {step}")


@dataclass(frozen=True)
class NetworkConfig:
    patch_size: int = 5
    channels: int = 1
    width: int = 16
    blocks: int = 4
    learning_rate: float = 1e-5
    batch_size: int = 256
    max_steps: int = 10000
    val_interval: int = 50
    patience: int = 1000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.patch_size not in ALLOWED_PATCH_SIZES:
            raise ValueError(f"patch_size must be one of {ALLOWED_PATCH_SIZES}")
        if self.channels not in (1, 2):
            raise ValueError("channels must be 1 or 2")
        for name in ("width", "blocks", "batch_size", "max_steps",
                     "val_interval", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass(frozen=True)
class PatchDataset:
    patches: np.ndarray  # (N, C, P, P) float64
    targets: np.ndarray  # (N,) float64
    tissue_labels: np.ndarray  # (N,) int16
    subject_ids: np.ndarray  # (N,) int64
    skipped: int = 0

    def __post_init__(self) -> None:
        n = self.patches.shape[0]
        if self.patches.ndim != 4:
            raise ValueError("patches must be (N, C, P, P)")
        if self.patches.shape[2] != self.patches.shape[3] or self.patches.shape[2] % 2 == 0:
            raise ValueError("patches must be square with odd side")
        if not (self.targets.shape == self.tissue_labels.shape
                == self.subject_ids.shape == (n,)):
            raise ValueError("per-patch arrays must all have length N")
        if n and (np.isnan(self.patches).any() or np.isnan(self.targets).any()):
            raise ValueError("dataset contains NaN")

    def __len__(self) -> int:
        return self.patches.shape[0]


def concat_datasets(parts: Sequence[PatchDataset]) -> PatchDataset:
    return PatchDataset(
        patches=np.concatenate([p.patches for p in parts], axis=0),
        targets=np.concatenate([p.targets for p in parts]),
        tissue_labels=np.concatenate([p.tissue_labels for p in parts]),
        subject_ids=np.concatenate([p.subject_ids for p in parts]),
        skipped=sum(p.skipped for p in parts),
    )


def _extract_with_coords(
    t1_map: Volume3D,
    sigma_map: Volume3D | None,
    labels: LabelMask,
    t1_ref: Volume3D,
    patch_size: int,
    channels: int,
):
    """Shared traversal behind extract_patches and predict_map.

    Returns (patches, targets, tissue_labels, coords, skipped) where
    coords is the (N, 3) array of kept center voxels, in emit order.
    """
    if patch_size % 2 == 0 or patch_size < 1:
        raise ValueError("patch size must be odd and positive")
    if channels == 2 and sigma_map is None:
        raise ValueError("channels=2 requires a sigma map")
    vols = [t1_map] + ([sigma_map] if channels == 2 else [])
    for v in vols + [t1_ref]:
        if v.dims != labels.dims:
            raise ValueError("volumes are not co-registered with the labels")
    H, W, S = labels.dims
    P = patch_size
    half = P // 2

    patch_list, tgt, lab, coords, skipped = [], [], [], [], 0
    for s in range(S):
        lab_slice = labels.data[:, :, s]
        centers = np.argwhere(lab_slice != 0)
        if centers.size == 0:
            continue
        chans = [v.data[:, :, s] for v in vols]
        ref_slice = t1_ref.data[:, :, s]
        inb = ((centers[:, 0] >= half) & (centers[:, 0] < H - half)
               & (centers[:, 1] >= half) & (centers[:, 1] < W - half))
        skipped += int(np.count_nonzero(~inb))
        for i, j in centers[inb]:
            win = np.stack([c[i - half:i + half + 1, j - half:j + half + 1]
                            for c in chans])
            t = ref_slice[i, j]
            if not (np.all(np.isfinite(win)) and np.isfinite(t)):
                skipped += 1
                continue
            patch_list.append(win)
            tgt.append(t)
            lab.append(lab_slice[i, j])
            coords.append((i, j, s))
    n = len(patch_list)
    patches = np.stack(patch_list) if n else np.empty((0, len(vols), P, P))
    return (
        patches,
        np.asarray(tgt, dtype=np.float64),
        np.asarray(lab, dtype=np.int16),
        np.asarray(coords, dtype=np.int64).reshape(-1, 3),
        skipped,
    )


def extract_patches(
    t1_map: Volume3D,
    sigma_map: Volume3D | None,
    labels: LabelMask,
    t1_ref: Volume3D,
    patch_size: int,
    channels: int,
    subject_id: int = 0,
) -> PatchDataset:
    """One sample per labeled voxel whose in-plane P x P window fits in
    the slice and is NaN-free (target included); axial = last axis."""
    patches, tgt, lab, _, skipped = _extract_with_coords(
        t1_map, sigma_map, labels, t1_ref, patch_size, channels
    )
    n = patches.shape[0]
    assert n + skipped == int(np.count_nonzero(labels.brain()))
    return PatchDataset(
        patches=patches,
        targets=tgt,
        tissue_labels=lab,
        subject_ids=np.full(n, int(subject_id), dtype=np.int64),
        skipped=skipped,
    )


# ---------------------------------------------------------------------------
# Weights.


def weight_shapes(cfg: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    w, c = cfg.width, cfg.channels
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("stem_w", (w, c, 3, 3)), ("stem_b", (w,)),
    ]
    for i in range(cfg.blocks):
        shapes += [
            (f"block{i}_conv1_w", (w, w, 3, 3)), (f"block{i}_conv1_b", (w,)),
            (f"block{i}_conv2_w", (w, w, 3, 3)), (f"block{i}_conv2_b", (w,)),
        ]
    shapes += [("head_w", (w,)), ("head_b", ())]
    return shapes


def _views(flat: np.ndarray, shapes) -> dict[str, np.ndarray]:
    out, off = {}, 0
    for name, shp in shapes:
        size = int(np.prod(shp)) if shp else 1
        out[name] = flat[off:off + size].reshape(shp)
        off += size
    if off != flat.size:
        raise ValueError(f"weight vector length {flat.size} != expected {off}")
    return out


def init_weights(cfg: NetworkConfig) -> np.ndarray:
    """He fan-in initialization from the model seed; biases zero."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xCA11]))
    shapes = weight_shapes(cfg)
    flat = np.zeros(sum(int(np.prod(s)) if s else 1 for _, s in shapes))
    views = _views(flat, shapes)
    for name, shp in shapes:
        if name.endswith("_b"):
            continue
        fan_in = int(np.prod(shp[1:])) if len(shp) > 1 else shp[0]
        views[name][...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shp)
    return flat


# ---------------------------------------------------------------------------
# Forward / backward.


def _forward_graph(params: dict[str, ad.Var], x: np.ndarray) -> ad.Var:
    h = ad.relu(ad.conv3x3_op(ad.constant(x), params["stem_w"], params["stem_b"]))
    i = 0
    while f"block{i}_conv1_w" in params:
        r = ad.relu(ad.conv3x3_op(h, params[f"block{i}_conv1_w"],
                                  params[f"block{i}_conv1_b"]))
        r = ad.conv3x3_op(r, params[f"block{i}_conv2_w"], params[f"block{i}_conv2_b"])
        h = ad.relu(ad.add(r, h))
        i += 1
    g = ad.global_avg_pool(h)
    return ad.affine(g, params["head_w"], params["head_b"])


def forward(cfg: NetworkConfig, flat: np.ndarray, batch: np.ndarray) -> np.ndarray:
    """Predicted seconds per patch; pure function of (weights, batch)."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[1:] != (cfg.channels, cfg.patch_size, cfg.patch_size):
        raise ValueError(
            f"batch shape {batch.shape} does not match config "
            f"(N, {cfg.channels}, {cfg.patch_size}, {cfg.patch_size})"
        )
    params = {k: ad.constant(v) for k, v in _views(flat, weight_shapes(cfg)).items()}
    return _forward_graph(params, batch).value


def backward(
    cfg: NetworkConfig, flat: np.ndarray, batch: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """(MSE loss, gradient d loss / d weights) for one batch."""
    batch = np.asarray(batch, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if batch.shape[0] != targets.shape[0]:
        raise ValueError("batch and targets disagree on N")
    if batch.ndim != 4 or batch.shape[1:] != (cfg.channels, cfg.patch_size, cfg.patch_size):
        raise ValueError(f"batch shape {batch.shape} does not match config")
    shapes = weight_shapes(cfg)
    params = {k: ad.Var(v) for k, v in _views(flat, shapes).items()}
    loss = ad.mse(_forward_graph(params, batch), targets)
    ad.backward(loss)
    grad = np.concatenate([
        np.ravel(params[name].grad if params[name].grad is not None
                 else np.zeros(shp if shp else ()))
        for name, shp in shapes
    ])
    return float(loss.value), grad


# ---------------------------------------------------------------------------
# Training.


@dataclass(frozen=True)
class CalibModel:
    config: NetworkConfig
    weights: np.ndarray  # flat float64
    log: tuple  # rows (step, train_mse, val_mse-or-nan)
    best_step: int

    def __post_init__(self) -> None:
        expected = sum(int(np.prod(s)) if s else 1 for _, s in weight_shapes(self.config))
        if self.weights.size != expected:
            raise ValueError(f"weight count {self.weights.size} != shape table {expected}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("non-finite weights")


def _eval_mse(cfg: NetworkConfig, flat: np.ndarray, ds: PatchDataset,
              chunk: int = 1024) -> float:
    se, n = 0.0, len(ds)
    for k in range(0, n, chunk):
        pred = forward(cfg, flat, ds.patches[k:k + chunk])
        se += float(np.sum((pred - ds.targets[k:k + chunk]) ** 2))
    return se / n


def train(train_ds: PatchDataset, val_ds: PatchDataset,
          cfg: NetworkConfig, val_cap: int | None = None) -> CalibModel:
    """Adam minibatch training with periodic validation and early stop.

    Batches are shuffled per epoch from the model seed; validation MSE
    is checked every val_interval steps; training halts at max_steps or
    once validation has not improved for ``patience`` steps. The
    returned weights are the best validation checkpoint. ``val_cap``
    optionally bounds the validation set to a deterministic subsample
    (keeps frequent checks affordable on large cohorts).
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("train and validation datasets must be nonempty")
    overlap = set(np.unique(train_ds.subject_ids)) & set(np.unique(val_ds.subject_ids))
    if overlap and not (len(train_ds) == len(val_ds)
                        and np.array_equal(train_ds.patches, val_ds.patches)):
        raise ValueError(f"train/val subject overlap: {sorted(map(int, overlap))}")
    if val_cap is not None and len(val_ds) > val_cap:
        sel = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 0x5E1])
        ).choice(len(val_ds), val_cap, replace=False)
        val_ds = PatchDataset(
            patches=val_ds.patches[sel], targets=val_ds.targets[sel],
            tissue_labels=val_ds.tissue_labels[sel],
            subject_ids=val_ds.subject_ids[sel], skipped=val_ds.skipped,
        )

    flat = init_weights(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xADA]))
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    n = len(train_ds)
    order = rng.permutation(n)
    pos = 0
    log: list[tuple[int, float, float]] = []
    best_val = np.inf
    best_step = 0
    best_weights = flat.copy()

    for step in range(1, cfg.max_steps + 1):
        if pos + cfg.batch_size > n:
            order = rng.permutation(n)
            pos = 0
        take = min(cfg.batch_size, n)
        idx = order[pos:pos + take]
        pos += take
        loss, grad = backward(cfg, flat, train_ds.patches[idx], train_ds.targets[idx])
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, log)
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        mhat = m / (1 - beta1**step)
        vhat = v / (1 - beta2**step)
        flat = flat - cfg.learning_rate * mhat / (np.sqrt(vhat) + eps)

        if step % cfg.val_interval == 0:
            val = _eval_mse(cfg, flat, val_ds)
            log.append((step, loss, val))
            if val < best_val:
                best_val = val
                best_step = step
                best_weights = flat.copy()
            elif step - best_step >= cfg.patience:
                break
        else:
            log.append((step, loss, np.nan))

    return CalibModel(config=cfg, weights=best_weights, log=tuple(log),
                      best_step=best_step)


# ---------------------------------------------------------------------------
# Prediction.


def predict_map(
    model: CalibModel,
    t1_map: Volume3D,
    sigma_map: Volume3D | None,
    labels: LabelMask,
) -> Volume3D:
    """Calibrated T1 at every valid labeled center voxel, NaN elsewhere."""
    cfg = model.config
    patches, _, _, coords, _ = _extract_with_coords(
        t1_map, sigma_map, labels, t1_map, cfg.patch_size, cfg.channels
    )
    out = np.full(labels.dims, np.nan)
    n = patches.shape[0]
    if n == 0:
        return Volume3D(out, t1_map.spacing)
    preds = np.empty(n)
    for k in range(0, n, 1024):
        preds[k:k + 1024] = forward(cfg, model.weights, patches[k:k + 1024])
    out[coords[:, 0], coords[:, 1], coords[:, 2]] = preds
    return Volume3D(out, t1_map.spacing)


# ---------------------------------------------------------------------------
# Cross-validation.


@dataclass(frozen=True)
class SubjectMaps:
    """Everything cross-validation needs from one subject."""

    subject_id: int
    t1_map: Volume3D  # MAP MP2RAGE estimate
    sigma_map: Volume3D | None
    labels: LabelMask
    t1_ref: Volume3D  # fitted SIR reference


@dataclass(frozen=True)
class FoldResult:
    fold: int
    test_subject: int
    val_subject: int
    train_subjects: tuple[int, ...]
    pre: dict[int, TissueMetrics]
    post: dict[int, TissueMetrics]
    model: CalibModel


def fold_assignments(n: int = 4) -> list[tuple[int, int, tuple[int, ...]]]:
    """(test, val, train...) index triples: val follows test cyclically."""
    out = []
    for t in range(n):
        v = (t + 1) % n
        out.append((t, v, tuple(k for k in range(n) if k not in (t, v))))
    return out


def cross_validate(
    subjects: Sequence[SubjectMaps], cfg: NetworkConfig,
    val_cap: int | None = None,
) -> list[FoldResult]:
    """Leave-one-out over exactly 4 subjects: per fold, test subject i,
    validation subject (i+1) mod 4, remaining two train."""
    if len(subjects) != 4:
        raise ValueError("cross_validate requires exactly 4 subjects")
    results = []
    for fold, (t, v, tr) in enumerate(fold_assignments(4)):
        def ds(s: SubjectMaps) -> PatchDataset:
            return extract_patches(s.t1_map, s.sigma_map, s.labels, s.t1_ref,
                                   cfg.patch_size, cfg.channels, s.subject_id)

        # each fold is an independent training run: give it its own
        # init/shuffle stream so across-fold spread reflects training
        # variability, not just which subject is held out
        fold_cfg = replace(cfg, seed=cfg.seed + fold)
        train_ds = concat_datasets([ds(subjects[k]) for k in tr])
        model = train(train_ds, ds(subjects[v]), fold_cfg, val_cap=val_cap)
        test = subjects[t]
        calibrated = predict_map(model, test.t1_map, test.sigma_map, test.labels)
        results.append(FoldResult(
            fold=fold,
            test_subject=test.subject_id,
            val_subject=subjects[v].subject_id,
            train_subjects=tuple(subjects[k].subject_id for k in tr),
            pre=tissue_metrics(test.t1_map, test.t1_ref, test.labels),
            post=tissue_metrics(calibrated, test.t1_ref, test.labels),
            model=model,
        ))
    return results


def summarize_folds(results: Sequence[FoldResult]) -> dict[str, dict[int, tuple[float, float]]]:
    """Across-fold (mean, sd) of RMSE and relative value, pre and post."""
    out: dict[str, dict[int, tuple[float, float]]] = {}
    for phase in ("pre", "post"):
        for attr in ("rmse", "relative_value"):
            per_label: dict[int, list[float]] = {}
            for r in results:
                for label, mtr in getattr(r, phase).items():
                    per_label.setdefault(label, []).append(getattr(mtr, attr))
            out[f"{phase}_{attr}"] = {
                label: (float(np.mean(vals)),
                        float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0)
                for label, vals in per_label.items()
            }
    return out


# ---------------------------------------------------------------------------
# Serialization: "CALW" container.

_MAGIC = b"CALW"
_VERSION = 1


def save_model(model: CalibModel, path: str | Path) -> None:
    cfg = model.config
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    buf.write(struct.pack(
        "<IIIIdIIIIq",
        cfg.patch_size, cfg.channels, cfg.width, cfg.blocks,
        cfg.learning_rate, cfg.batch_size, cfg.max_steps,
        cfg.val_interval, cfg.patience, cfg.seed,
    ))
    shapes = weight_shapes(cfg)
    buf.write(struct.pack("<I", len(shapes)))
    for name, shp in shapes:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", len(shp)))
        for d in shp:
            buf.write(struct.pack("<I", d))
    buf.write(struct.pack("<q", model.best_step))
    buf.write(struct.pack("<Q", model.weights.size))
    buf.write(model.weights.astype("<f8").tobytes())
    log_txt = training_curve_csv_text(model).encode()
    buf.write(struct.pack("<Q", len(log_txt)))
    buf.write(log_txt)
    Path(path).write_bytes(buf.getvalue())


def load_model(path: str | Path) -> CalibModel:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)

    def need(n: int) -> bytes:
        b = buf.read(n)
        if len(b) != n:
            raise ValueError("truncated model file")
        return b

    if need(4) != _MAGIC:
        raise ValueError("not a CALW model file")
    (version,) = struct.unpack("<I", need(4))
    if version != _VERSION:
        raise ValueError(f"unsupported CALW version {version}")
    vals = struct.unpack("<IIIIdIIIIq", need(struct.calcsize("<IIIIdIIIIq")))
    cfg = NetworkConfig(
        patch_size=vals[0], channels=vals[1], width=vals[2], blocks=vals[3],
        learning_rate=vals[4], batch_size=vals[5], max_steps=vals[6],
        val_interval=vals[7], patience=vals[8], seed=vals[9],
    )
    (n_shapes,) = struct.unpack("<I", need(4))
    shapes = []
    for _ in range(n_shapes):
        (ln,) = struct.unpack("<H", need(2))
        name = need(ln).decode()
        (nd,) = struct.unpack("<I", need(4))
        shp = tuple(struct.unpack("<I", need(4))[0] for _ in range(nd))
        shapes.append((name, shp))
    if shapes != weight_shapes(cfg):
        raise ValueError("shape table does not match the stored config")
    (best_step,) = struct.unpack("<q", need(8))
    (n_weights,) = struct.unpack("<Q", need(8))
    weights = np.frombuffer(need(8 * n_weights), dtype="<f8").copy()
    (log_len,) = struct.unpack("<Q", need(8))
    log = _parse_curve_csv(need(log_len).decode())
    return CalibModel(config=cfg, weights=weights, log=tuple(log), best_step=best_step)


def training_curve_csv_text(model: CalibModel) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["step", "train_mse", "val_mse"])
    for step, tr, vl in model.log:
        w.writerow([step, f"{tr:.17g}", "" if np.isnan(vl) else f"{vl:.17g}"])
    return out.getvalue()


def _parse_curve_csv(text: str) -> list[tuple[int, float, float]]:
    rows = []
    r = csv.reader(io.StringIO(text))
    header = next(r, None)
    if header != ["step", "train_mse", "val_mse"]:
        raise ValueError("bad training-log block")
    for step, tr, vl in r:
        rows.append((int(step), float(tr), float(vl) if vl else np.nan))
    return rows


def write_training_curve_csv(model: CalibModel, path: str | Path) -> None:
    Path(path).write_text(training_curve_csv_text(model))
