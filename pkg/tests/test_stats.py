"""Wilcoxon exactness against enumeration; accounting formulas and flags."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flmae.stats import (PairedSample, _ranks_with_ties, comm_cost,
                         compare_models_paired, exact_cdf_le, macs_report,
                         wilcoxon_signed_rank)


def enumeration_p(diffs: np.ndarray) -> float:
    """Literal 2^n sign-assignment oracle for the two-sided exact p."""
    diffs = diffs[diffs != 0.0]
    ranks = _ranks_with_ties(np.abs(diffs))
    w_plus = ranks[diffs > 0].sum()
    w_minus = ranks[diffs < 0].sum()
    w = min(w_plus, w_minus)
    count = 0
    for signs in itertools.product((1, -1), repeat=diffs.size):
        wp = sum(r for s, r in zip(signs, ranks) if s > 0)
        if wp <= w + 1e-12:
            count += 1
    return min(1.0, 2.0 * count / 2 ** diffs.size)


class TestWilcoxonExact:
    def test_six_positive_pairs(self):
        result = wilcoxon_signed_rank([(i + 1.0, 0.0) for i in range(6)])
        assert result.w == 0.0
        assert abs(result.p - 0.03125) < 1e-15
        assert not result.reject  # 0.03125 > alpha = 0.01

    def test_eight_positive_pairs_rejected(self):
        result = wilcoxon_signed_rank([(i + 1.0, 0.0) for i in range(8)])
        assert abs(result.p - 2 / 256) < 1e-15
        assert result.reject and result.winner == "a"

    def test_antisymmetry_under_side_swap(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=10), rng.normal(size=10)
        r1 = wilcoxon_signed_rank(list(zip(a, b)))
        r2 = wilcoxon_signed_rank(list(zip(b, a)))
        assert r1.p == r2.p and r1.w == r2.w
        if r1.reject:
            assert {r1.winner, r2.winner} == {"a", "b"}

    def test_all_zero_differences_no_evidence(self):
        result = wilcoxon_signed_rank([(1.0, 1.0)] * 8)
        assert result.outcome == "no-evidence"
        assert result.n_effective == 0 and not result.reject

    def test_matches_enumeration_on_random_samples(self):
        """200 random paired samples, n <= 12, with ties and zeros."""
        rng = np.random.default_rng(1)
        for trial in range(200):
            n = int(rng.integers(2, 13))
            diffs = np.round(rng.normal(size=n), 1)
            if np.all(diffs == 0):
                continue
            got = wilcoxon_signed_rank([(d, 0.0) for d in diffs], mode="exact")
            assert abs(got.p - enumeration_p(diffs)) < 1e-12, f"trial {trial}"

    def test_rank_invariance_under_monotone_scaling(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=9), rng.normal(size=9)
        r1 = wilcoxon_signed_rank(list(zip(a, b)))
        r2 = wilcoxon_signed_rank(list(zip(2 * a, 2 * b)))
        assert r1.w == r2.w and r1.p == r2.p

    def test_normal_mode_for_large_n(self):
        rng = np.random.default_rng(3)
        diffs = rng.normal(0.8, 1.0, size=50)
        result = wilcoxon_signed_rank([(d, 0.0) for d in diffs])
        assert result.mode == "normal"
        assert 0.0 <= result.p <= 1.0
        assert result.reject  # strong consistent shift

    def test_normal_approximation_tracks_exact(self):
        rng = np.random.default_rng(4)
        diffs = rng.normal(0.3, 1.0, size=18)
        exact = wilcoxon_signed_rank([(d, 0.0) for d in diffs], mode="exact")
        approx = wilcoxon_signed_rank([(d, 0.0) for d in diffs], mode="normal")
        assert abs(exact.p - approx.p) < 0.02

    def test_paired_sample_objects_accepted(self):
        pairs = [PairedSample(i, float(i + 1), 0.0) for i in range(6)]
        assert abs(wilcoxon_signed_rank(pairs).p - 0.03125) < 1e-15

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([(1.0, 0.0)], mode="bayesian")

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 100_000))
    def test_exact_cdf_is_a_cdf(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 10))
        ranks = _ranks_with_ties(rng.uniform(0.1, 5.0, size=n))
        total = ranks.sum()
        assert exact_cdf_le(total, ranks) == pytest.approx(1.0)
        assert exact_cdf_le(-1.0, ranks) == 0.0


class TestCompareModels:
    def test_model_against_itself_no_evidence(self):
        report = compare_models_paired(lambda m, u: float(u), "m", "m",
                                       units=range(10))
        assert report["outcome"] == "no-evidence"
        assert report["winner"] == "tie"

    def test_metric_blind_noise_no_evidence(self):
        # the perturbed copy scores identically: metric unaffected
        report = compare_models_paired(lambda m, u: 1.0, "a", "b", units=range(8))
        assert report["outcome"] == "no-evidence"

    def test_perfect_model_beats_constant_model(self):
        def score(model, unit):
            return 0.0 if model == "perfect" else 1.0 + unit * 0.01

        report = compare_models_paired(score, "perfect", "constant",
                                       units=range(20), higher_is_better=False)
        assert report["p"] < 0.01
        assert report["winner"] == "model_a"
        assert report["significance_mark"] == "*"

    def test_group_level_aggregation(self):
        scores = {0: 0.1, 1: 0.3, 2: 0.2}

        def score(model, unit):
            base = scores[unit % 3]
            return base if model == "a" else base + 0.1

        report = compare_models_paired(score, "a", "b", units=range(12),
                                       level="group",
                                       group_ids=[u % 3 for u in range(12)])
        assert report["n_units"] == 3
        assert report["level"] == "group"

    def test_empty_units_rejected(self):
        with pytest.raises(ValueError):
            compare_models_paired(lambda m, u: 0.0, "a", "b", units=[])


class TestCommCost:
    def test_full_scale_formula_values(self):
        report = comm_cost(116.66e6, 4, 15, 9)
        assert abs(report.bidirectional_mb_per_round_per_client - 933.28) < 1e-9
        assert abs(report.total_gb - 125.9928) < 1e-9

    def test_reference_ratios_flagged(self):
        ref = comm_cost(116.66e6, 4, 15, 9).reference
        assert abs(ref["reported_mb_per_round_per_client"] - 893.0) < 1e-12
        assert abs(ref["mb_ratio_reported_over_formula"] - 893.0 / 933.28) < 1e-12
        assert abs(ref["reported_total_gb"] - 121.0) < 1e-12
        assert abs(ref["gb_ratio_reported_over_formula"] - 121.0 / 125.9928) < 1e-9
        assert round(ref["mb_ratio_reported_over_formula"], 3) == 0.957

    def test_minimal_case_two_bytes(self):
        report = comm_cost(1, 1, 1, 1)
        assert report.total_bytes == 2.0

    def test_linearity_in_rounds_and_clients(self):
        base = comm_cost(1000, 8, 3, 4).total_bytes
        assert comm_cost(1000, 8, 6, 4).total_bytes == 2 * base
        assert comm_cost(1000, 8, 3, 8).total_bytes == 2 * base

    def test_positive_inputs_required(self):
        with pytest.raises(ValueError):
            comm_cost(0, 4, 1, 1)


class TestMacsReport:
    COUNTS = (178129, 13195, 43456, 1083, 350539, 38192, 73618, 761, 35576)

    def test_largest_site_row(self):
        report = macs_report(self.COUNTS)
        heico = report["clients"][4]
        assert abs(heico["ops"] - 79.51e12) / 79.51e12 < 1e-3
        assert abs(heico["fraction"] - 0.4772) < 1e-4

    def test_single_client_full_fraction(self):
        report = macs_report([500])
        assert report["clients"][0]["fraction"] == 1.0

    def test_doubling_counts_is_homogeneous(self):
        a = macs_report(self.COUNTS)
        b = macs_report([2 * c for c in self.COUNTS])
        for ra, rb in zip(a["clients"], b["clients"]):
            assert abs(rb["ops"] - 2 * ra["ops"]) < 1e-3
            assert abs(rb["fraction"] - ra["fraction"]) < 1e-12

    def test_fractions_sum_to_one(self):
        report = macs_report(self.COUNTS)
        assert abs(sum(c["fraction"] for c in report["clients"]) - 1.0) < 1e-9

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            macs_report([-1, 2])
