"""Validators, Little's law, seeding, and batch-mean confidence intervals."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dynmatch.core import (
    MarketParams,
    ParamError,
    PolicyKind,
    Regime,
    RunControls,
    T_QUANTILE_975_DF19,
    batch_mean_ci,
    little_law,
    regime,
    replica_seeds,
    replica_sequences,
    validate_controls,
    validate_params,
)


GOOD = MarketParams(lambda_h=1.0, lambda_e=2.0, p_h=0.01, p_e=0.5, d=1)


class TestValidateParams:
    def test_returns_argument_unchanged(self):
        assert validate_params(GOOD) is GOOD

    def test_lambda_e_zero_is_legal(self):
        validate_params(MarketParams(1.0, 0.0, 0.01, 0.5))

    def test_equal_probabilities_are_legal(self):
        validate_params(MarketParams(1.0, 2.0, 0.5, 0.5))

    @pytest.mark.parametrize(
        "bad",
        [
            MarketParams(0.0, 2.0, 0.01, 0.5),
            MarketParams(-1.0, 2.0, 0.01, 0.5),
            MarketParams(math.inf, 2.0, 0.01, 0.5),
            MarketParams(math.nan, 2.0, 0.01, 0.5),
            MarketParams(1.0, -0.5, 0.01, 0.5),
            MarketParams(1.0, math.inf, 0.01, 0.5),
            MarketParams(1.0, 2.0, 0.0, 0.5),
            MarketParams(1.0, 2.0, 1.0001, 1.0),
            MarketParams(1.0, 2.0, -0.1, 0.5),
            MarketParams(1.0, 2.0, 0.01, 0.0),
            MarketParams(1.0, 2.0, 0.01, 1.5),
            MarketParams(1.0, 2.0, 0.6, 0.5),  # hard type easier than easy type
            MarketParams(1.0, 2.0, 0.01, 0.5, d=0),
            MarketParams(1.0, 2.0, 0.01, 0.5, d=-3),
            MarketParams(1.0, 2.0, 0.01, 0.5, d=1.5),
            MarketParams(1.0, 2.0, 0.01, 0.5, d=True),
        ],
    )
    def test_rejects_bad_parameters(self, bad):
        with pytest.raises(ParamError):
            validate_params(bad)


class TestValidateControls:
    def test_returns_argument_unchanged(self):
        rc = RunControls(arrivals=100)
        assert validate_controls(rc) is rc

    def test_zero_warmup_is_legal(self):
        validate_controls(RunControls(arrivals=100, warmup_fraction=0.0))

    @pytest.mark.parametrize(
        "bad",
        [
            RunControls(arrivals=1),
            RunControls(arrivals=100.0),
            RunControls(arrivals=100, warmup_fraction=1.0),
            RunControls(arrivals=100, warmup_fraction=-0.1),
            RunControls(arrivals=100, seed=-1),
            RunControls(arrivals=100, seed=2**64),
            RunControls(arrivals=100, seed=1.5),
            RunControls(arrivals=100, replicas=0),
        ],
    )
    def test_rejects_bad_controls(self, bad):
        with pytest.raises(ParamError):
            validate_controls(bad)


class TestLittleLaw:
    def test_divides_count_by_rate(self):
        assert little_law(21.0, 2.0) == pytest.approx(10.5)

    def test_zero_rate_rejected(self):
        with pytest.raises(ParamError):
            little_law(1.0, 0.0)


class TestRegime:
    def test_classification(self):
        assert regime(MarketParams(1.0, 2.0, 0.01, 0.5)) is Regime.H_MINORITY
        assert regime(MarketParams(2.0, 1.0, 0.01, 0.5)) is Regime.H_MAJORITY
        assert regime(MarketParams(2.0, 2.0, 0.01, 0.5)) is Regime.BALANCED


class TestPolicyNames:
    def test_enum_values_are_stable(self):
        assert PolicyKind.BILATERAL_H.value == "bilateral_h"
        assert PolicyKind.BILATERAL_E.value == "bilateral_e"
        assert PolicyKind.CHAIN.value == "chain"
        assert PolicyKind.CHAIN_HAT.value == "chain_hat"
        assert PolicyKind.BILATERAL_E_TILDE.value == "bilateral_e_tilde"
        assert PolicyKind.MAX_CHAINS.value == "max_chains"


class TestReplicaSeeds:
    def test_deterministic_and_distinct(self):
        a = replica_seeds(42, 8)
        b = replica_seeds(42, 8)
        assert a == b
        assert len(set(a)) == 8

    def test_prefix_stability(self):
        assert replica_seeds(7, 3) == replica_seeds(7, 6)[:3]

    def test_different_base_seeds_differ(self):
        assert replica_seeds(0, 4) != replica_seeds(1, 4)

    def test_sequences_spawn_per_replica(self):
        seqs = replica_sequences(5, 3)
        assert len(seqs) == 3
        assert all(isinstance(s, np.random.SeedSequence) for s in seqs)

    def test_replicas_must_be_positive(self):
        with pytest.raises(ParamError):
            replica_seeds(0, 0)


class TestBatchMeanCI:
    def test_frozen_t_quantile(self):
        assert T_QUANTILE_975_DF19 == 2.093024054408263

    def test_matches_hand_computation_with_20_batches(self):
        rng = np.random.default_rng(1)
        values = rng.normal(size=100)
        mean, half = batch_mean_ci(values, batches=20)
        batch = values.reshape(20, 5).mean(axis=1)
        assert mean == pytest.approx(float(batch.mean()), abs=1e-15)
        expected = 2.093024054408263 * float(batch.std(ddof=1)) / math.sqrt(20)
        assert half == pytest.approx(expected, rel=1e-12)

    def test_drops_remainder_at_series_start(self):
        values = list(range(43))
        mean, _ = batch_mean_ci(values, batches=20)
        assert mean == pytest.approx(np.mean(values[3:]))

    def test_non_default_batch_count_uses_matching_quantile(self):
        rng = np.random.default_rng(2)
        values = rng.normal(size=50)
        _, half = batch_mean_ci(values, batches=10)
        batch = values.reshape(10, 5).mean(axis=1)
        t_975_df9 = 2.2621571627409915
        expected = t_975_df9 * float(batch.std(ddof=1)) / math.sqrt(10)
        assert half == pytest.approx(expected, rel=1e-9)

    def test_series_too_short_rejected(self):
        with pytest.raises(ParamError):
            batch_mean_ci([1.0, 2.0], batches=20)

    @given(
        st.lists(
            st.floats(min_value=-1e6, max_value=1e6),
            min_size=40,
            max_size=200,
        )
    )
    def test_mean_lies_inside_reported_interval(self, values):
        mean, half = batch_mean_ci(values, batches=20)
        n = len(values)
        window = np.asarray(values)[n - 20 * (n // 20) :]
        assert math.isfinite(mean) and half >= 0
        assert abs(mean - float(window.mean())) <= 1e-9 * (1 + abs(mean))
