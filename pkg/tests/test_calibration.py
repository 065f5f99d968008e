"""Tests for binning, calibration metrics, temperature scaling, and export."""

import math

import numpy as np
import pytest

from fedcalib.calibration import (
    LogitBatch,
    ProbBatch,
    TemperatureScaler,
    accuracy_score,
    apply_temperature,
    bin_predictions,
    brier_score,
    calibration_report,
    expected_calibration_error,
    fit_temperature,
    harmonic_mean,
    negative_log_likelihood,
    pool_bins,
    reliability_csv,
    reliability_rows,
    reliability_svg,
    temperature_sweep,
)
from fedcalib.errors import InvalidInputError
from fedcalib.numerics import RngStream, softmax_rows

from oracles import (
    naive_accuracy,
    naive_ace,
    naive_brier,
    naive_ece,
    naive_mce,
    naive_nll,
    random_prob_batch,
)


def two_sample_batch():
    # conf 0.8 (correct) and 0.6 (incorrect): with G = 1 this gives
    # acc 0.5, conf 0.7, gap 0.2
    probs = np.array([[0.8, 0.2], [0.6, 0.4]])
    labels = np.array([0, 1])
    return ProbBatch(probs, labels)


class TestProbBatch:
    def test_rejects_bad_rows(self):
        with pytest.raises(InvalidInputError):
            ProbBatch(np.array([[0.5, 0.6]]), np.array([0]))
        with pytest.raises(InvalidInputError):
            ProbBatch(np.array([[0.5, 0.5]]), np.array([2]))
        with pytest.raises(InvalidInputError):
            ProbBatch(np.zeros((0, 2)), np.zeros(0, dtype=int))

    def test_argmax_tie_breaks_low_index(self):
        b = ProbBatch(np.array([[0.5, 0.5]]), np.array([1]))
        assert b.predictions()[0] == 0


class TestBinPredictions:
    def test_single_sample(self):
        b = ProbBatch(np.array([[0.7, 0.3]]), np.array([0]))
        rb = bin_predictions(b, 10)
        nonempty = rb.counts > 0
        assert nonempty.sum() == 1
        assert rb.accuracy[nonempty][0] == 1.0
        assert rb.confidence[nonempty][0] == pytest.approx(0.7)

    def test_two_sample_single_bin(self):
        rb = bin_predictions(two_sample_batch(), 1)
        assert rb.counts[0] == 2
        assert rb.accuracy[0] == pytest.approx(0.5)
        assert rb.confidence[0] == pytest.approx(0.7)

    def test_boundary_confidence_goes_to_lower_bin(self):
        # conf exactly 0.1 with G = 10 belongs to bin 1, interval (0, 0.1]
        probs = np.full((1, 10), 0.1)
        rb = bin_predictions(ProbBatch(probs, np.array([0])), 10)
        assert rb.counts[0] == 1
        assert rb.counts[1:].sum() == 0

    def test_counts_sum_to_n(self):
        rng = RngStream(30)
        for i in range(30):
            probs, labels = random_prob_batch(rng)
            rb = bin_predictions(ProbBatch(probs, labels), 15)
            assert rb.counts.sum() == len(labels)

    def test_equal_mass_sizes(self):
        rng = RngStream(31)
        probs, labels = random_prob_batch(rng, max_n=103)
        rb = bin_predictions(ProbBatch(probs, labels), 7, scheme="equal_mass")
        n = len(labels)
        assert rb.counts.sum() == n
        assert rb.counts.max() - rb.counts.min() <= 1

    def test_rejects_zero_bins(self):
        with pytest.raises(InvalidInputError):
            bin_predictions(two_sample_batch(), 0)


class TestMetricsAgainstOracle:
    def test_trivial_perfect_predictions(self):
        probs = np.eye(4)[np.array([0, 1, 2, 3])]
        batch = ProbBatch(probs, np.array([0, 1, 2, 3]))
        rep = calibration_report(batch, 15)
        assert rep.accuracy == 1.0
        assert rep.ece == 0.0
        assert rep.mce == 0.0
        assert rep.ace == 0.0
        assert rep.brier == 0.0
        assert rep.nll == 0.0

    def test_two_sample_hand_values(self):
        rep = calibration_report(two_sample_batch(), 1)
        assert rep.ece == pytest.approx(0.2)
        assert rep.mce == pytest.approx(0.2)
        assert rep.ace == pytest.approx(0.2)

    def test_uniform_binary_closed_form(self):
        batch = ProbBatch(np.array([[0.5, 0.5]]), np.array([1]))
        assert brier_score(batch) == pytest.approx(0.5)
        assert negative_log_likelihood(batch) == pytest.approx(math.log(2.0))

    def test_oracle_equivalence_100_batches(self):
        rng = RngStream(32)
        for i in range(100):
            probs, labels = random_prob_batch(rng)
            batch = ProbBatch(probs, labels)
            rep = calibration_report(batch, 15)
            assert abs(rep.ece - naive_ece(probs, labels, 15)) <= 1e-12
            assert abs(rep.mce - naive_mce(probs, labels, 15)) <= 1e-12
            assert abs(rep.ace - naive_ace(probs, labels, 15)) <= 1e-12
            assert abs(rep.brier - naive_brier(probs, labels)) <= 1e-12
            assert abs(rep.nll - naive_nll(probs, labels)) <= 1e-12
            assert abs(rep.accuracy - naive_accuracy(probs, labels)) <= 1e-12

    def test_mce_dominates_ece_and_ace(self):
        rng = RngStream(33)
        for i in range(500):
            probs, labels = random_prob_batch(rng, max_n=60)
            rep = calibration_report(ProbBatch(probs, labels), 15)
            assert rep.mce >= rep.ece - 1e-15
            assert rep.mce >= rep.ace - 1e-15

    def test_permutation_invariance(self):
        rng = RngStream(34)
        probs, labels = random_prob_batch(rng)
        perm = RngStream(35).permutation(len(labels))
        a = calibration_report(ProbBatch(probs, labels), 15)
        b = calibration_report(ProbBatch(probs[perm], labels[perm]), 15)
        for key, val in a.scalars().items():
            assert val == pytest.approx(b.scalars()[key], abs=1e-12)

    def test_split_and_pool_reproduces_whole_batch(self):
        rng = RngStream(36)
        probs, labels = random_prob_batch(rng, max_n=150)
        n = len(labels)
        if n < 2:
            probs = np.vstack([probs, probs])
            labels = np.concatenate([labels, labels])
            n = 2
        cut = n // 2
        whole = bin_predictions(ProbBatch(probs, labels), 15)
        left = bin_predictions(ProbBatch(probs[:cut], labels[:cut]), 15)
        right = bin_predictions(ProbBatch(probs[cut:], labels[cut:]), 15)
        pooled = pool_bins([left, right])
        assert np.array_equal(pooled.counts, whole.counts)
        assert expected_calibration_error(pooled) == pytest.approx(
            expected_calibration_error(whole), abs=1e-12
        )

    def test_brier_range(self):
        # totally wrong confident prediction gives the maximum of 2
        batch = ProbBatch(np.array([[1.0, 0.0]]), np.array([1]))
        assert brier_score(batch) == pytest.approx(2.0)


class TestTemperature:
    def _random_logits(self, seed, n=64, c=6, sharp=3.0, flip=0.25):
        # labels mostly agree with the argmax so the NLL-optimal temperature
        # is interior rather than pinned at a bound
        rng = RngStream(seed)
        logits = rng.normal(n * c).reshape(n, c) * sharp
        labels = logits.argmax(axis=1)
        flips = rng.random(n) < flip
        labels[flips] = (rng.u64(n)[flips] % np.uint64(c)).astype(np.int64)
        return LogitBatch(logits, labels)

    def test_tau_one_is_plain_softmax(self):
        lb = self._random_logits(40)
        scaled = apply_temperature(lb, TemperatureScaler(1.0))
        assert np.allclose(scaled.probs, softmax_rows(lb.logits))

    def test_large_tau_approaches_uniform(self):
        lb = self._random_logits(41, c=5)
        scaled = apply_temperature(lb, TemperatureScaler(1e6))
        assert np.allclose(scaled.probs, 0.2, atol=1e-5)

    def test_accuracy_bit_equal_under_scaling(self):
        lb = self._random_logits(42)
        base = accuracy_score(apply_temperature(lb, TemperatureScaler(1.0)))
        for tau in (0.1, 0.5, 1.0, 2.0, 5.0):
            scaled = apply_temperature(lb, TemperatureScaler(tau))
            assert accuracy_score(scaled) == base

    def test_rejects_nonpositive_tau(self):
        with pytest.raises(InvalidInputError):
            TemperatureScaler(0.0)
        with pytest.raises(InvalidInputError):
            TemperatureScaler(-2.0)

    def test_fitted_never_worse_than_unit(self):
        for seed in range(10):
            lb = self._random_logits(50 + seed, sharp=4.0)
            scaler = fit_temperature(lb)
            nll_fit = negative_log_likelihood(apply_temperature(lb, scaler))
            nll_one = negative_log_likelihood(apply_temperature(lb, TemperatureScaler(1.0)))
            assert nll_fit <= nll_one + 1e-15

    def test_refit_of_scaled_logits_is_near_one(self):
        lb = self._random_logits(60, n=256, sharp=5.0)
        first = fit_temperature(lb)
        rescaled = LogitBatch(lb.logits / first.temperature, lb.labels)
        second = fit_temperature(rescaled)
        assert abs(second.temperature - 1.0) <= 1e-2

    def test_scaling_logits_scales_fitted_tau(self):
        lb = self._random_logits(61, n=256, sharp=5.0)
        t1 = fit_temperature(lb).temperature
        k = 2.5
        t2 = fit_temperature(LogitBatch(lb.logits * k, lb.labels)).temperature
        assert t2 == pytest.approx(k * t1, rel=2e-2)

    def test_single_confident_correct_sample_hits_lower_bound(self):
        lb = LogitBatch(np.array([[4.0, 0.0, 0.0]]), np.array([0]))
        scaler = fit_temperature(lb)
        assert scaler.temperature == pytest.approx(0.05, abs=1e-3)

    def test_sweep_reports_per_tau(self):
        lb = self._random_logits(62)
        rows = temperature_sweep(lb, [0.5, 1.0, 2.0])
        assert [tau for tau, _ in rows] == [0.5, 1.0, 2.0]
        accs = {rep.accuracy for _, rep in rows}
        assert len(accs) == 1  # argmax invariance


class TestHarmonicMean:
    def test_equal_inputs(self):
        assert harmonic_mean(90.0, 90.0) == pytest.approx(90.0)

    def test_zero_annihilates(self):
        assert harmonic_mean(75.0, 0.0) == 0.0
        assert harmonic_mean(0.0, 0.0) == 0.0

    def test_reference_value(self):
        assert harmonic_mean(89.34, 89.83) == pytest.approx(89.58, abs=5e-3)

    def test_rejects_negative(self):
        with pytest.raises(InvalidInputError):
            harmonic_mean(-1.0, 5.0)


class TestReliabilityExport:
    def test_rows_match_bins(self):
        rb = bin_predictions(two_sample_batch(), 1)
        rows = reliability_rows(rb)
        assert rows == [(0.5, 0.5, pytest.approx(0.7), 2)]

    def test_csv_header_and_shape(self):
        rb = bin_predictions(two_sample_batch(), 5)
        text = reliability_csv(rb)
        lines = text.strip().split("\n")
        assert lines[0] == "bin_midpoint,accuracy,confidence,count"
        assert len(lines) == 6

    def test_svg_deterministic(self):
        rb = bin_predictions(two_sample_batch(), 15)
        assert reliability_svg(rb) == reliability_svg(rb)

    def test_svg_renders_empty_bins(self):
        rb = bin_predictions(two_sample_batch(), 15)
        svg = reliability_svg(rb)
        # one accuracy bar and one gap overlay per bin, empty or not
        assert svg.count("<rect") == 1 + 2 * 15
        assert svg.startswith("<svg")


class TestReportInvariants:
    def test_empty_batch_rejected(self):
        with pytest.raises(InvalidInputError):
            ProbBatch(np.zeros((0, 3)), np.zeros(0, dtype=int))

    def test_nll_nonnegative_brier_bounded(self):
        rng = RngStream(70)
        for i in range(100):
            probs, labels = random_prob_batch(rng, max_n=40)
            rep = calibration_report(ProbBatch(probs, labels), 10)
            assert rep.nll >= 0.0
            assert 0.0 <= rep.brier <= 2.0
