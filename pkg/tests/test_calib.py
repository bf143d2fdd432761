import numpy as np
import pytest

from qt1map.calib import (
    CalibModel,
    NetworkConfig,
    PatchDataset,
    TrainingDivergedError,
    _eval_mse,
    cross_validate,
    extract_patches,
    fold_assignments,
    forward,
    init_weights,
    load_model,
    predict_map,
    save_model,
    train,
    weight_shapes,
)
from qt1map.volume import LABEL_CGM, LABEL_WM, LabelMask, Volume3D


def make_volume(data):
    return Volume3D(np.asarray(data, dtype=np.float64))


def full_labels(dims, label=LABEL_WM):
    return LabelMask(np.full(dims, label, dtype=np.int16))


class TestConfig:
    def test_patch_size_whitelist(self):
        with pytest.raises(ValueError):
            NetworkConfig(patch_size=3)

    def test_channels_whitelist(self):
        with pytest.raises(ValueError):
            NetworkConfig(channels=3)

    def test_positive_rate(self):
        with pytest.raises(ValueError):
            NetworkConfig(learning_rate=0.0)


class TestExtractPatches:
    def test_count_on_fully_labeled_slice(self):
        dims = (16, 16, 1)
        t1 = make_volume(np.ones(dims))
        labels = full_labels(dims)
        ds = extract_patches(t1, None, labels, t1, patch_size=5, channels=1)
        assert len(ds) == 144  # (16-4)^2 interior centers
        assert ds.skipped == 16 * 16 - 144

    def test_patch_size_one_keeps_every_labeled_voxel(self):
        dims = (6, 6, 2)
        t1 = make_volume(np.random.default_rng(0).normal(size=dims))
        lab = np.zeros(dims, dtype=np.int16)
        lab[1:4, 2:5, :] = LABEL_CGM
        ds = extract_patches(t1, None, LabelMask(lab), t1, 1, 1)
        assert len(ds) == int(np.count_nonzero(lab))
        assert ds.skipped == 0
        np.testing.assert_array_equal(np.sort(ds.patches.ravel()),
                                      np.sort(t1.data[lab != 0]))

    def test_nan_target_skipped(self):
        dims = (8, 8, 1)
        t1 = make_volume(np.ones(dims))
        ref = np.ones(dims)
        ref[4, 4, 0] = np.nan
        ds = extract_patches(t1, None, full_labels(dims), make_volume(ref), 5, 1)
        assert len(ds) == 16 - 1
        assert not np.isnan(ds.targets).any()

    def test_channels_2_needs_sigma(self):
        dims = (8, 8, 1)
        t1 = make_volume(np.ones(dims))
        with pytest.raises(ValueError):
            extract_patches(t1, None, full_labels(dims), t1, 5, 2)

    def test_sigma_channel_stacked_second(self):
        dims = (8, 8, 1)
        t1 = make_volume(np.ones(dims))
        sig = make_volume(np.full(dims, 0.25))
        ds = extract_patches(t1, sig, full_labels(dims), t1, 5, 2)
        assert ds.patches.shape[1] == 2
        assert np.all(ds.patches[:, 0] == 1.0)
        assert np.all(ds.patches[:, 1] == 0.25)

    def test_dataset_rejects_nan_patches(self):
        with pytest.raises(ValueError):
            PatchDataset(
                patches=np.full((1, 1, 5, 5), np.nan),
                targets=np.zeros(1),
                tissue_labels=np.zeros(1, dtype=np.int16),
                subject_ids=np.zeros(1, dtype=np.int64),
            )


def toy_dataset(n, cfg, seed, subject_id=0, target_fn=None):
    rng = np.random.default_rng(seed)
    patches = rng.normal(1.5, 0.3,
                         size=(n, cfg.channels, cfg.patch_size, cfg.patch_size))
    centers = patches[:, 0, cfg.patch_size // 2, cfg.patch_size // 2]
    targets = centers if target_fn is None else target_fn(centers)
    return PatchDataset(
        patches=patches, targets=np.asarray(targets, dtype=np.float64),
        tissue_labels=np.full(n, LABEL_WM, dtype=np.int16),
        subject_ids=np.full(n, subject_id, dtype=np.int64),
    )


class TestTraining:
    def test_overfit_small_dataset(self):
        cfg = NetworkConfig(patch_size=5, width=8, blocks=2,
                            learning_rate=1e-3, batch_size=32,
                            max_steps=2000, val_interval=50,
                            patience=2000, seed=1)
        ds = toy_dataset(32, cfg, seed=11)
        model = train(ds, ds, cfg)  # identical arrays: self-val is allowed
        final = _eval_mse(cfg, model.weights, ds)
        initial = _eval_mse(cfg, init_weights(cfg), ds)
        assert final < 0.01 * initial

    def test_returns_best_validation_checkpoint(self):
        cfg = NetworkConfig(patch_size=5, width=4, blocks=1,
                            learning_rate=1e-3, batch_size=16,
                            max_steps=300, val_interval=50,
                            patience=300, seed=2)
        tr = toy_dataset(48, cfg, seed=3, subject_id=0)
        va = toy_dataset(24, cfg, seed=4, subject_id=1)
        model = train(tr, va, cfg)
        vals = [v for _, _, v in model.log if np.isfinite(v)]
        assert _eval_mse(cfg, model.weights, va) == pytest.approx(min(vals),
                                                                  rel=1e-12)
        best_logged = min((v, s) for s, _, v in model.log if np.isfinite(v))
        assert model.best_step == best_logged[1]

    def test_patience_stops_on_plateau(self):
        """Training targets equal the initial network's own predictions,
        so every gradient is exactly zero and validation never moves:
        the first check is the best and training stops patience steps
        later."""
        cfg = NetworkConfig(patch_size=5, width=4, blocks=1,
                            learning_rate=1e-3, batch_size=16,
                            max_steps=5000, val_interval=50,
                            patience=200, seed=5)
        tr = toy_dataset(48, cfg, seed=6, subject_id=0)
        tr = PatchDataset(
            patches=tr.patches,
            targets=forward(cfg, init_weights(cfg), tr.patches),
            tissue_labels=tr.tissue_labels, subject_ids=tr.subject_ids,
        )
        va = toy_dataset(24, cfg, seed=7, subject_id=1)
        model = train(tr, va, cfg)
        last_step = model.log[-1][0]
        assert model.best_step == 50
        assert last_step == 50 + cfg.patience

    def test_deterministic_given_seed(self):
        cfg = NetworkConfig(patch_size=5, width=4, blocks=1,
                            learning_rate=1e-3, batch_size=16,
                            max_steps=120, val_interval=40,
                            patience=120, seed=8)
        tr = toy_dataset(32, cfg, seed=9, subject_id=0)
        va = toy_dataset(16, cfg, seed=10, subject_id=1)
        a = train(tr, va, cfg)
        b = train(tr, va, cfg)
        np.testing.assert_array_equal(a.weights, b.weights)
        assert a.log == b.log

    def test_subject_overlap_rejected(self):
        cfg = NetworkConfig(patch_size=5, width=4, blocks=1, batch_size=8,
                            max_steps=10, val_interval=5, patience=10)
        tr = toy_dataset(16, cfg, seed=1, subject_id=0)
        va = toy_dataset(8, cfg, seed=2, subject_id=0)
        with pytest.raises(ValueError, match="overlap"):
            train(tr, va, cfg)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises(self):
        cfg = NetworkConfig(patch_size=5, width=4, blocks=1,
                            learning_rate=1e120, batch_size=16,
                            max_steps=500, val_interval=50,
                            patience=500, seed=12)
        tr = toy_dataset(32, cfg, seed=13, subject_id=0)
        va = toy_dataset(16, cfg, seed=14, subject_id=1)
        with pytest.raises(TrainingDivergedError) as exc:
            train(tr, va, cfg)
        assert exc.value.step >= 1

    def test_val_cap_subsamples_deterministically(self):
        cfg = NetworkConfig(patch_size=5, width=4, blocks=1,
                            learning_rate=1e-3, batch_size=16,
                            max_steps=100, val_interval=50,
                            patience=100, seed=15)
        tr = toy_dataset(32, cfg, seed=16, subject_id=0)
        va = toy_dataset(64, cfg, seed=17, subject_id=1)
        a = train(tr, va, cfg, val_cap=16)
        b = train(tr, va, cfg, val_cap=16)
        np.testing.assert_array_equal(a.weights, b.weights)


@pytest.fixture(scope="module")
def identity_model():
    """Network trained to reproduce the patch-center value."""
    cfg = NetworkConfig(patch_size=5, width=8, blocks=2,
                        learning_rate=1e-3, batch_size=64,
                        max_steps=3000, val_interval=50,
                        patience=3000, seed=20)
    tr = toy_dataset(512, cfg, seed=21, subject_id=0)
    va = toy_dataset(128, cfg, seed=22, subject_id=1)
    return train(tr, va, cfg)


class TestPredictMap:
    def test_identity_learning_within_2pct(self, identity_model):
        model = identity_model
        dims = (14, 14, 2)
        rng = np.random.default_rng(23)
        t1 = make_volume(rng.normal(1.5, 0.3, dims))
        out = predict_map(model, t1, None, full_labels(dims))
        inner = out.data[2:-2, 2:-2, :]
        truth = t1.data[2:-2, 2:-2, :]
        assert np.all(np.isfinite(inner))
        rel = np.abs(inner - truth) / truth
        assert np.median(rel) < 0.02

    def test_unlabeled_volume_all_nan(self, identity_model):
        model = identity_model
        dims = (8, 8, 1)
        t1 = make_volume(np.ones(dims))
        out = predict_map(model, t1, None,
                          LabelMask(np.zeros(dims, dtype=np.int16)))
        assert np.all(np.isnan(out.data))

    def test_edges_nan(self, identity_model):
        model = identity_model
        dims = (10, 10, 1)
        t1 = make_volume(np.ones(dims))
        out = predict_map(model, t1, None, full_labels(dims))
        assert np.all(np.isnan(out.data[0, :, :]))
        assert np.all(np.isnan(out.data[:, -1, :]))
        assert np.all(np.isfinite(out.data[2:-2, 2:-2, :]))


class TestCrossValidation:
    def test_fold_assignments_cyclic(self):
        assert fold_assignments(4) == [
            (0, 1, (2, 3)),
            (1, 2, (0, 3)),
            (2, 3, (0, 1)),
            (3, 0, (1, 2)),
        ]

    def test_requires_exactly_four_subjects(self):
        cfg = NetworkConfig(patch_size=5, width=4, blocks=1, batch_size=8,
                            max_steps=10, val_interval=5, patience=10)
        with pytest.raises(ValueError):
            cross_validate([], cfg)

    def test_four_subject_smoke(self):
        from qt1map.calib import SubjectMaps

        cfg = NetworkConfig(patch_size=5, width=4, blocks=1,
                            learning_rate=1e-3, batch_size=32,
                            max_steps=100, val_interval=50,
                            patience=100, seed=30)
        dims = (12, 12, 2)
        rng = np.random.default_rng(31)
        subjects = []
        for sid in range(4):
            truth = rng.normal(1.5, 0.2, dims)
            subjects.append(SubjectMaps(
                subject_id=sid,
                t1_map=make_volume(truth * 0.85),
                sigma_map=None,
                labels=full_labels(dims),
                t1_ref=make_volume(truth),
            ))
        results = cross_validate(subjects, cfg)
        assert [r.test_subject for r in results] == [0, 1, 2, 3]
        assert [r.val_subject for r in results] == [1, 2, 3, 0]
        for r in results:
            assert r.test_subject not in r.train_subjects
            assert r.val_subject not in r.train_subjects
            assert LABEL_WM in r.pre and LABEL_WM in r.post


class TestSerialization:
    def test_round_trip(self, tmp_path):
        cfg = NetworkConfig(patch_size=5, width=4, blocks=1,
                            learning_rate=1e-3, batch_size=16,
                            max_steps=60, val_interval=20,
                            patience=60, seed=40)
        tr = toy_dataset(16, cfg, seed=41, subject_id=0)
        va = toy_dataset(8, cfg, seed=42, subject_id=1)
        model = train(tr, va, cfg)
        path = tmp_path / "m.calw"
        save_model(model, path)
        back = load_model(path)
        assert back.config == model.config
        np.testing.assert_array_equal(back.weights, model.weights)
        assert back.best_step == model.best_step
        assert len(back.log) == len(model.log)
        for (s1, t1_, v1), (s2, t2, v2) in zip(model.log, back.log):
            assert s1 == s2 and t1_ == t2
            assert (np.isnan(v1) and np.isnan(v2)) or v1 == v2

    def test_magic_bytes(self, tmp_path):
        cfg = NetworkConfig(patch_size=1, width=4, blocks=1, batch_size=4,
                            max_steps=5, val_interval=5, patience=5)
        model = CalibModel(config=cfg, weights=init_weights(cfg),
                           log=(), best_step=0)
        path = tmp_path / "m.calw"
        save_model(model, path)
        assert path.read_bytes()[:4] == b"CALW"

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.calw"
        path.write_bytes(b"NOPE" + b"\0" * 64)
        with pytest.raises(ValueError):
            load_model(path)

    def test_weight_count_validated(self):
        cfg = NetworkConfig(patch_size=5, width=4, blocks=1)
        with pytest.raises(ValueError):
            CalibModel(config=cfg, weights=np.zeros(3), log=(), best_step=0)

    def test_weight_shapes_total(self):
        cfg = NetworkConfig(patch_size=5, channels=2, width=4, blocks=2)
        total = sum(int(np.prod(s)) if s else 1 for _, s in weight_shapes(cfg))
        assert init_weights(cfg).size == total
        # stem 4*2*9+4, two blocks of 2*(4*4*9+4), head 4+1
        assert total == (4 * 2 * 9 + 4) + 2 * 2 * (4 * 4 * 9 + 4) + 5
