"""Metric exactness against closed forms and an independent density oracle."""

import json
import math

import numpy as np
import pytest
from scipy import stats

from fvcprog.metrics import (DistributionFit, LaplaceParams, MetricsReport,
                             PatientScore, SigmaPolicy, estimate_sigma,
                             fit_distributions, laplace_ll, laplace_ll_mean,
                             rmse)

SQRT2 = math.sqrt(2.0)


class TestRmse:
    def test_zero_error(self):
        assert rmse([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0

    def test_single_pair(self):
        assert rmse([2693.0], [2690.0]) == pytest.approx(3.0, abs=1e-12)

    def test_three_four_residuals(self):
        assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(math.sqrt(12.5), abs=1e-12)

    def test_rmse_dominates_mae(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = rng.normal(size=10)
            t = rng.normal(size=10)
            assert rmse(p, t) >= np.mean(np.abs(t - p)) - 1e-12

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            rmse([], [])


class TestLaplaceLL:
    def test_zero_error_matched_sigma(self):
        assert laplace_ll(0.0, 0.0, sigma=1 / SQRT2) == pytest.approx(0.0, abs=1e-15)

    def test_zero_error_sigma_sqrt2(self):
        assert laplace_ll(0.0, 0.0, sigma=SQRT2) == pytest.approx(-math.log(2), abs=1e-12)

    def test_hundred_over_seventy(self):
        got = laplace_ll(0.0, 100.0, sigma=70.0)
        expect = -math.log(SQRT2 * 70.0) - SQRT2 * 100.0 / 70.0
        assert got == pytest.approx(expect, abs=1e-12)
        assert got == pytest.approx(-6.615373921433754, abs=1e-12)

    def test_matches_laplace_logpdf_oracle(self):
        # the score is the log-density of a Laplace with b = sigma/sqrt(2)
        rng = np.random.default_rng(1)
        for _ in range(200):
            delta = float(rng.normal(0, 300))
            sigma = float(rng.uniform(10, 500))
            got = laplace_ll(0.0, delta, sigma=sigma)
            oracle = stats.laplace.logpdf(delta, loc=0.0, scale=sigma / SQRT2)
            assert got == pytest.approx(float(oracle), rel=1e-12)

    def test_monotone_in_error(self):
        deltas = np.linspace(0, 2000, 300)
        scores = laplace_ll(np.zeros_like(deltas), deltas, sigma=120.0)
        assert np.all(np.diff(scores) <= 1e-15)

    def test_sigma_maximizer_is_sqrt2_delta(self):
        delta = 250.0
        sigmas = np.linspace(1.0, 2000.0, 20000)
        scores = np.array([laplace_ll(0.0, delta, s) for s in sigmas])
        best = sigmas[np.argmax(scores)]
        assert best == pytest.approx(SQRT2 * delta, rel=1e-3)

    def test_clip_constant_below_sigma_min(self):
        clip = (70.0, 1000.0)
        ref = laplace_ll(0.0, 50.0, sigma=70.0, clip=clip)
        for sigma in (1.0, 10.0, 69.9):
            assert laplace_ll(0.0, 50.0, sigma=sigma, clip=clip) == pytest.approx(ref)

    def test_clip_constant_above_error_max(self):
        clip = (70.0, 1000.0)
        ref = laplace_ll(0.0, 1000.0, sigma=200.0, clip=clip)
        for delta in (1000.5, 5000.0, 1e7):
            assert laplace_ll(0.0, delta, sigma=200.0, clip=clip) == pytest.approx(ref)

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ValueError):
            laplace_ll(0.0, 1.0, sigma=0.0)

    def test_batch_mean(self):
        got = laplace_ll_mean([0.0, 0.0], [0.0, 0.0], sigma=SQRT2)
        assert got == pytest.approx(-math.log(2), abs=1e-12)


class TestEstimateSigma:
    def test_degenerate_floor(self):
        assert estimate_sigma([0.0, 0.0, 0.0]) == 1.0

    def test_single_residual(self):
        assert estimate_sigma([70.0]) == pytest.approx(70.0 * SQRT2, rel=1e-12)

    def test_symmetric_pair(self):
        assert estimate_sigma([-50.0, 50.0]) == pytest.approx(50.0 * SQRT2, rel=1e-12)

    def test_median_center(self):
        # residuals {10, 20, 90}: median 20, MAD = (10+0+70)/3
        got = estimate_sigma([10.0, 20.0, 90.0], center="median")
        assert got == pytest.approx(SQRT2 * 80.0 / 3.0, rel=1e-12)

    def test_scale_equivariance(self):
        rng = np.random.default_rng(2)
        r = rng.normal(0, 200, size=100)
        s1 = estimate_sigma(r)
        s3 = estimate_sigma(3.0 * r)
        assert s3 == pytest.approx(3.0 * s1, rel=1e-12)


class TestFitDistributions:
    def test_closed_form_small_sample(self):
        fit = fit_distributions([1.0, 2.0, 3.0])
        assert fit.gaussian_mean == pytest.approx(2.0)
        assert fit.gaussian_sd == pytest.approx(math.sqrt(2.0 / 3.0), rel=1e-12)
        assert fit.laplace.mu == pytest.approx(2.0)
        assert fit.laplace.b == pytest.approx(2.0 / 3.0, rel=1e-12)

    def test_symmetric_data_locations_match(self):
        rng = np.random.default_rng(3)
        half = rng.uniform(1, 100, size=500)
        values = np.concatenate([2000 + half, 2000 - half])
        fit = fit_distributions(values)
        assert fit.gaussian_mean == pytest.approx(fit.laplace.mu, abs=1e-9)

    def test_bin_count_bounds(self):
        rng = np.random.default_rng(4)
        for n in (10, 100, 100000):
            fit = fit_distributions(rng.normal(0, 1, size=n))
            assert 20 <= len(fit.counts) <= 100

    def test_histogram_counts_everything(self):
        rng = np.random.default_rng(5)
        v = rng.normal(0, 1, size=1234)
        fit = fit_distributions(v)
        assert fit.counts.sum() == 1234

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            fit_distributions([5.0, 5.0, 5.0])

    def test_pdfs_integrate_to_one(self):
        fit = DistributionFit(gaussian_mean=10.0, gaussian_sd=3.0,
                              laplace=LaplaceParams(mu=10.0, b=2.0),
                              bin_edges=np.array([0.0, 1.0]),
                              counts=np.array([1]))
        x = np.linspace(-100, 120, 200001)
        for pdf in (fit.gaussian_pdf, fit.laplace_pdf):
            assert np.trapezoid(pdf(x), x) == pytest.approx(1.0, abs=1e-6)


class TestSigmaPolicy:
    def test_fixed_requires_sigma(self):
        with pytest.raises(ValueError):
            SigmaPolicy(mode="fixed")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            SigmaPolicy(mode="whatever")

    def test_clip_validation(self):
        with pytest.raises(ValueError):
            SigmaPolicy(clip=(-1.0, 100.0))


class TestMetricsReport:
    def test_json_round_trip(self):
        report = MetricsReport(
            per_patient=[PatientScore("P1", 4, -3.1, -3.0, 12.0, -5.5)],
            rmse=12.0, lll=-5.5, sigma=88.0,
            sigma_policy=SigmaPolicy(mode="fixed", sigma=88.0).to_dict(),
            n_visits=4, residuals=[1.0, -2.0])
        parsed = json.loads(report.to_json(run={"command": "eval"}))
        assert parsed["rmse"] == 12.0
        assert parsed["per_patient"][0]["patient_id"] == "P1"
        assert parsed["run"]["command"] == "eval"
