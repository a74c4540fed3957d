"""Training loop contracts: determinism, leakage guard, checkpoints, scoring."""

import logging
import math

import numpy as np
import pytest

import fvcprog.training as training_mod
from fvcprog.checkpoint import load_checkpoint
from fvcprog.data import (ClinicalRecord, CtVolume, FvcSeries, NormStats,
                          PatientSample, Sex, Smoking, SynthSpec,
                          generate_synthetic)
from fvcprog.metrics import SigmaPolicy
from fvcprog.model import ModelConfig, init_params, predict_slope, set_target_stats
from fvcprog.training import (TrainConfig, evaluate_model, l1_slope_loss,
                              patient_slope_target, run_training)

SMALL = ModelConfig(image_size=32, gate_channels=4, cnn_channels=(8, 16, 32),
                    token_grid=4, vit_embed=32, vit_heads=4, vit_depth=1,
                    clinical_hidden=8, clinical_out=16, fusion_hidden=32)


def small_patients(n=5, seed=3):
    return generate_synthetic(
        SynthSpec(patients=n, slices_per_patient=3, image_size=32, visits=4),
        seed=seed)


def line_patient(pid, slope, baseline=3000.0, weeks=(0.0, 10.0, 20.0), age=60):
    """Patient whose FVC series is an exact line (noise-free)."""
    points = tuple((w, baseline + slope * w) for w in weeks)
    slices = np.full((2, 32, 32), 40, dtype=np.int32)  # no dark lungs
    return PatientSample(
        clinical=ClinicalRecord(pid, age, Sex.MALE, Smoking.EX_SMOKER),
        volume=CtVolume(slices=slices, keep_range=(0, 1)),
        fvc=FvcSeries(points=points),
    )


class TestL1SlopeLoss:
    def test_zero_residual(self):
        assert l1_slope_loss([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_hand_computed(self):
        assert l1_slope_loss([1.0, 3.0], [2.0, 2.0]) == pytest.approx(1.0)

    def test_permutation_invariant(self):
        p, t = [1.0, 5.0, -2.0], [0.0, 4.0, 1.0]
        assert l1_slope_loss(p, t) == l1_slope_loss(p[::-1], t[::-1])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            l1_slope_loss([], [])

    def test_non_negative(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert l1_slope_loss(rng.normal(size=5), rng.normal(size=5)) >= 0.0


class TestSlopeTargets:
    def test_exact_line_recovered(self):
        patient = line_patient("P1", slope=-5.0)
        assert patient_slope_target(patient) == pytest.approx(-5.0, abs=1e-10)

    def test_rezeroing_applied(self):
        # negative first week; slope unaffected by the shift
        points = ((-8.0, 3040.0), (0.0, 3000.0), (12.0, 2940.0))
        patient = PatientSample(
            clinical=ClinicalRecord("P2", 60, Sex.FEMALE, Smoking.NEVER_SMOKED),
            volume=CtVolume(slices=np.zeros((1, 8, 8), dtype=np.int32),
                            keep_range=(0, 0)),
            fvc=FvcSeries(points=points))
        assert patient_slope_target(patient) == pytest.approx(-5.0, abs=1e-10)


class TestRunTraining:
    def test_zero_lr_keeps_initial_params(self):
        patients = small_patients(4)
        cfg = TrainConfig(folds=2, epochs=1, learning_rate=0.0, seed=9,
                          eval_every=1)
        results, _ = run_training(patients, SMALL, cfg)
        fold_seeds = np.random.SeedSequence(9).spawn(2)
        seed_init, _ = fold_seeds[0].spawn(2)
        fresh = init_params(SMALL, seed=int(seed_init.generate_state(1)[0]),
                            dtype=np.float32)
        for name in fresh.trainable_names():
            np.testing.assert_array_equal(results[0].params[name].data,
                                          fresh[name].data)

    def test_identical_seed_identical_log(self):
        patients = small_patients(4)
        cfg = TrainConfig(folds=2, epochs=2, seed=5, eval_every=2)
        _, log1 = run_training(patients, SMALL, cfg)
        _, log2 = run_training(patients, SMALL, cfg)
        assert log1.to_jsonl() == log2.to_jsonl()

    def test_loss_decreases_on_overfit_fixture(self):
        patients = small_patients(4)
        cfg = TrainConfig(folds=2, epochs=15, learning_rate=2e-3, seed=1,
                          eval_every=15)
        _, log = run_training(patients, SMALL, cfg)
        for fold in (0, 1):
            losses = [e["train_loss"] for e in log.entries if e["fold"] == fold]
            assert min(losses) < losses[0]
            assert all(l >= 0 for l in losses)

    def test_one_entry_per_epoch_per_fold(self):
        patients = small_patients(4)
        cfg = TrainConfig(folds=2, epochs=3, seed=2, eval_every=2)
        _, log = run_training(patients, SMALL, cfg)
        assert len(log.entries) == 2 * 3
        for fold in (0, 1):
            epochs = [e["epoch"] for e in log.entries if e["fold"] == fold]
            assert epochs == [1, 2, 3]
        # val metrics only on eval epochs (and the final epoch)
        evald = [e for e in log.entries if e["val_lll"] is not None]
        assert {e["epoch"] for e in evald} == {2, 3}

    def test_leakage_assertion_fires_on_bad_folds(self, monkeypatch):
        patients = small_patients(4)

        def overlapping_folds(pts, k, seed):
            return [(list(pts), list(pts[:1]))]

        monkeypatch.setattr(training_mod, "kfold_split", overlapping_folds)
        with pytest.raises(AssertionError, match="leakage"):
            run_training(patients, SMALL, TrainConfig(folds=2, epochs=1, seed=0))

    def test_singular_series_patient_skipped_with_warning(self, caplog):
        patients = small_patients(4)

        class _ConstantTimes:
            values = np.array([2000.0, 2000.0])
            baseline = 2000.0
            points = ((0.0, 2000.0), (0.0, 2000.0))

            @staticmethod
            def rezeroed_times():
                return np.array([0.0, 0.0])

        bad = PatientSample.__new__(PatientSample)
        bad.clinical = ClinicalRecord("BAD", 60, Sex.MALE, Smoking.EX_SMOKER)
        bad.volume = patients[0].volume
        bad.fvc = _ConstantTimes()
        cfg = TrainConfig(folds=2, epochs=1, seed=11, eval_every=1)
        with caplog.at_level(logging.WARNING):
            results, log = run_training(patients + [bad], SMALL, cfg)
        assert any("BAD" in r.message for r in caplog.records)
        assert len(results) == 2

    def test_wall_clock_excluded_from_jsonl(self):
        patients = small_patients(4)
        cfg = TrainConfig(folds=2, epochs=1, seed=3, eval_every=1)
        _, log = run_training(patients, SMALL, cfg)
        assert log.wall_clock is not None and log.wall_clock > 0
        assert "wall_clock" not in log.to_jsonl()


class TestCheckpointRoundTrip:
    def test_reload_gives_identical_predictions(self, tmp_path):
        patients = small_patients(4)
        cfg = TrainConfig(folds=2, epochs=2, seed=6, eval_every=2)
        results, _ = run_training(patients, SMALL, cfg, out_dir=tmp_path)
        loaded, header = load_checkpoint(results[0].checkpoint_path)
        rng = np.random.default_rng(0)
        img = rng.random((3, 1, 32, 32)).astype(np.float32)
        msk = np.ones_like(img)
        clin = rng.random((3, 4)).astype(np.float32)
        before = predict_slope(results[0].params, img, msk, clin, SMALL)
        after = predict_slope(loaded, img, msk, clin, SMALL)
        np.testing.assert_array_equal(before, after)
        assert header["meta"]["norm_stats"]["age_min"] <= \
            header["meta"]["norm_stats"]["age_max"]

    def test_evaluate_checkpoint_matches_in_memory(self, tmp_path):
        from fvcprog.training import evaluate_checkpoint
        patients = small_patients(4)
        cfg = TrainConfig(folds=2, epochs=2, seed=6, eval_every=2)
        results, _ = run_training(patients, SMALL, cfg, out_dir=tmp_path)
        r = results[0]
        policy = SigmaPolicy(mode="train_residual_laplace")
        from_ckpt = evaluate_checkpoint(r.checkpoint_path, patients, policy)
        in_memory = evaluate_model(r.params, SMALL, patients, r.norm_stats,
                                   policy, sigma_value=r.sigma)
        assert from_ckpt.rmse == pytest.approx(in_memory.rmse, rel=1e-6)
        assert from_ckpt.lll == pytest.approx(in_memory.lll, rel=1e-6)
        assert from_ckpt.sigma == pytest.approx(r.sigma)


class TestEvaluateModel:
    def perfect_setup(self, slope=-5.0):
        # identical latent slope everywhere + degenerate target sd makes
        # every prediction exactly that slope
        patients = [line_patient(f"P{i}", slope=slope) for i in range(2)]
        params = init_params(SMALL, seed=21)
        set_target_stats(params, slope, 1e-30)
        norm = NormStats(49, 88)
        return patients, params, norm

    def test_perfect_predictor_zero_rmse(self):
        patients, params, norm = self.perfect_setup()
        report = evaluate_model(params, SMALL, patients, norm,
                                SigmaPolicy(mode="fixed", sigma=70.0))
        assert report.rmse == pytest.approx(0.0, abs=1e-9)

    def test_perfect_predictor_lll_zero_at_matched_sigma(self):
        patients, params, norm = self.perfect_setup()
        report = evaluate_model(params, SMALL, patients, norm,
                                SigmaPolicy(mode="fixed", sigma=1 / math.sqrt(2)))
        assert report.lll == pytest.approx(0.0, abs=1e-9)

    def test_baseline_visit_excluded(self):
        patients, params, norm = self.perfect_setup()
        report = evaluate_model(params, SMALL, patients, norm,
                                SigmaPolicy(mode="fixed", sigma=70.0))
        # 3 visits per patient, baseline excluded -> 2 scored each
        assert report.n_visits == 4
        assert all(p.visits_scored == 2 for p in report.per_patient)

    def test_two_patient_hand_computed_aggregates(self):
        # predictions pinned at -5; patient B truly declines at -3
        patients = [line_patient("A", slope=-5.0), line_patient("B", slope=-3.0)]
        params = init_params(SMALL, seed=22)
        set_target_stats(params, -5.0, 1e-30)
        norm = NormStats(49, 88)
        sigma = 70.0
        report = evaluate_model(params, SMALL, patients, norm,
                                SigmaPolicy(mode="fixed", sigma=sigma))
        # A: residuals (0, 0); B: truth - pred = 2t at t=10,20 -> (20, 40)
        expect_rmse = math.sqrt((0 + 0 + 20 ** 2 + 40 ** 2) / 4)
        assert report.rmse == pytest.approx(expect_rmse, rel=1e-6)
        lll = [-math.log(math.sqrt(2) * sigma) - math.sqrt(2) * d / sigma
               for d in (0.0, 0.0, 20.0, 40.0)]
        assert report.lll == pytest.approx(sum(lll) / 4, rel=1e-6)
        by_id = {p.patient_id: p for p in report.per_patient}
        assert by_id["A"].rmse == pytest.approx(0.0, abs=1e-9)
        assert by_id["B"].rmse == pytest.approx(math.sqrt((400 + 1600) / 2), rel=1e-6)

    def test_train_residual_policy_needs_source(self):
        patients, params, norm = self.perfect_setup()
        with pytest.raises(ValueError, match="sigma"):
            evaluate_model(params, SMALL, patients, norm,
                           SigmaPolicy(mode="train_residual_laplace"))

    def test_train_residual_policy_from_residuals(self):
        patients, params, norm = self.perfect_setup()
        report = evaluate_model(params, SMALL, patients, norm,
                                SigmaPolicy(mode="train_residual_laplace"),
                                train_residuals=[70.0])
        assert report.sigma == pytest.approx(70.0 * math.sqrt(2), rel=1e-9)

    def test_empty_patient_list_rejected(self):
        _, params, norm = self.perfect_setup()
        with pytest.raises(ValueError):
            evaluate_model(params, SMALL, [], norm,
                           SigmaPolicy(mode="fixed", sigma=1.0))

    def test_slice_order_permutation_invariant(self):
        # patient-level aggregation is a mean over slice predictions
        patients, params, norm = self.perfect_setup()
        from fvcprog.lungmask import MaskParams
        from fvcprog.training import _predict_patient_slope, _prepare_patient
        pdata = _prepare_patient(patients[0], norm, SMALL, MaskParams(),
                                 True, np.float32)
        base = _predict_patient_slope(params, pdata, SMALL)
        pdata.images = pdata.images[::-1].copy()
        pdata.masks = pdata.masks[::-1].copy()
        flipped = _predict_patient_slope(params, pdata, SMALL)
        assert base == pytest.approx(flipped, abs=1e-7)
