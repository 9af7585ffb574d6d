"""Closed-form limits, drift fixed points, merge effects, and tail bounds."""

import dataclasses
import math

import pytest

from dynmatch.core import (
    BoundConditionError,
    MarketParams,
    ParamError,
    PolicyKind,
)
from dynmatch.theory import (
    Kind,
    LimitResult,
    Scaling,
    TailBoundSpec,
    bound_chain,
    bounds_bilateral_e,
    chain_length_limit,
    competing_rate_threshold,
    critical_ratio,
    drift_residual,
    drift_solve,
    heuristic_chain_constant,
    lemma1_lower_tail_bound,
    lemma2_upper_tail_bound,
    limit_bilateral_h,
    merge_gain,
)


class TestEnums:
    def test_scaling_values(self):
        assert Scaling.INV_PH.value == "1/p_h"
        assert Scaling.INV_PH_SQ.value == "1/p_h**2"

    def test_kind_values(self):
        assert {k.value for k in Kind} == {
            "exact",
            "upper_bound",
            "lower_bound",
            "heuristic",
        }

    def test_limit_result_requires_positive_constant(self):
        with pytest.raises(ParamError):
            LimitResult(Scaling.INV_PH, 0.0, Kind.EXACT)
        with pytest.raises(ParamError):
            LimitResult(Scaling.INV_PH, math.inf, Kind.EXACT)


class TestBilateralHLimit:
    def test_scarce_hard_side(self):
        res = limit_bilateral_h(MarketParams(1.0, 2.0, 0.002, 0.5))
        assert res.scaling is Scaling.INV_PH
        assert res.kind is Kind.EXACT
        assert res.constant == pytest.approx(math.log(2.0) / 0.5, rel=1e-14)

    def test_abundant_hard_side(self):
        res = limit_bilateral_h(MarketParams(2.0, 1.0, 0.02, 0.5))
        assert res.scaling is Scaling.INV_PH_SQ
        assert res.constant == pytest.approx(math.log(4.0 / 3.0) / 2.0, rel=1e-14)

    def test_balanced_market_rejected(self):
        with pytest.raises(ParamError):
            limit_bilateral_h(MarketParams(2.0, 2.0, 0.01, 0.5))

    def test_probability_of_easy_agents_scales_scarce_constant(self):
        a = limit_bilateral_h(MarketParams(1.0, 2.0, 0.002, 0.5)).constant
        b = limit_bilateral_h(MarketParams(1.0, 2.0, 0.002, 1.0)).constant
        assert a == pytest.approx(2.0 * b, rel=1e-14)


class TestBilateralEBounds:
    def test_scarce_side_ordering_and_values(self):
        lower, upper, heur = bounds_bilateral_e(MarketParams(1.0, 2.0, 0.002, 0.5))
        assert lower.kind is Kind.LOWER_BOUND
        assert upper.kind is Kind.UPPER_BOUND
        assert heur.kind is Kind.HEURISTIC
        assert lower.constant == pytest.approx(math.log(2.0) / 0.5, rel=1e-14)
        assert upper.constant == pytest.approx(math.log(4.0) / 0.5, rel=1e-14)
        assert heur.constant == pytest.approx(math.log(3.0) / 0.5, rel=1e-14)
        assert lower.constant < heur.constant < upper.constant

    def test_abundant_side_collapses_to_exact(self):
        results = bounds_bilateral_e(MarketParams(2.0, 1.0, 0.02, 0.5))
        exact = limit_bilateral_h(MarketParams(2.0, 1.0, 0.02, 0.5))
        for res in results:
            assert res == exact
            assert res.kind is Kind.EXACT


class TestChainLimits:
    def test_certain_easy_match_is_exact_and_bridge_count_free(self):
        res1 = bound_chain(MarketParams(1.0, 2.0, 0.005, 1.0, d=1))
        res10 = bound_chain(MarketParams(1.0, 2.0, 0.005, 1.0, d=10))
        assert res1.kind is Kind.EXACT
        assert res1.constant == pytest.approx(math.log(1.5), rel=1e-14)
        assert res1.constant == res10.constant

    def test_partial_easy_match_gives_upper_bound(self):
        res = bound_chain(MarketParams(1.0, 2.0, 0.002, 0.5, d=1))
        assert res.kind is Kind.UPPER_BOUND
        assert res.constant == pytest.approx(math.log(2.0), rel=1e-14)
        assert res.scaling is Scaling.INV_PH

    def test_more_bridges_never_hurt(self):
        cs = [
            bound_chain(MarketParams(1.0, 2.0, 0.01, 0.5, d=d)).constant
            for d in (1, 2, 5, 20)
        ]
        assert all(b <= a for a, b in zip(cs, cs[1:]))

    def test_no_easy_arrivals_rejected(self):
        with pytest.raises(ParamError):
            bound_chain(MarketParams(1.0, 0.0, 0.01, 0.5))


class TestChainHeuristic:
    def test_frozen_value_small_hard_probability(self):
        got = heuristic_chain_constant(MarketParams(1.0, 2.0, 0.002, 0.5, d=1))
        assert got == pytest.approx(math.log(3.0 / 2.002), rel=1e-14)

    def test_frozen_value_balanced_rates(self):
        got = heuristic_chain_constant(MarketParams(3.0, 3.0, 0.002, 0.5, d=1))
        assert got == pytest.approx(math.log(6.0 / 3.006) / 3.0, rel=1e-14)

    def test_nonincreasing_in_bridge_count(self):
        vals = [
            heuristic_chain_constant(MarketParams(1.0, 2.0, 0.05, 0.5, d=d))
            for d in range(1, 30)
        ]
        assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))

    def test_vanishing_hard_probability_limit(self):
        got = heuristic_chain_constant(MarketParams(1.0, 2.0, 1e-12, 0.5, d=1))
        assert got == pytest.approx(math.log(1.5), rel=1e-9)

    def test_no_easy_arrivals_rejected(self):
        with pytest.raises(ParamError):
            heuristic_chain_constant(MarketParams(1.0, 0.0, 0.01, 0.5))


class TestChainLengthLimit:
    def test_certain_easy_match(self):
        assert chain_length_limit(1.0, 2.0, 1.0, 1) == pytest.approx(1.5)

    def test_balanced_half_probability(self):
        # (2 + 2*0.5) / (2*0.5) + 1
        assert chain_length_limit(2.0, 2.0, 0.5, 1) == pytest.approx(4.0)

    def test_more_bridges_start_segments_more_often(self):
        vals = [chain_length_limit(1.0, 2.0, 0.3, d) for d in (1, 2, 5)]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    @pytest.mark.parametrize(
        "args",
        [(0.0, 2.0, 0.5, 1), (1.0, 0.0, 0.5, 1), (1.0, 2.0, 0.0, 1), (1.0, 2.0, 0.5, 0)],
    )
    def test_rejects_bad_arguments(self, args):
        with pytest.raises(ParamError):
            chain_length_limit(*args)


class TestCriticalRatio:
    def test_value_and_fixed_point(self):
        x = critical_ratio()
        assert 2.17 <= x <= 2.19
        assert x == pytest.approx(2.175378795194244, abs=1e-9)
        assert (x + 1.0) * math.log(2.0 - 2.0 / (x + 1.0)) == pytest.approx(
            1.0, abs=1e-10
        )

    def test_peak_of_abundant_side_constant(self):
        x = critical_ratio()

        def const(ratio: float) -> float:
            return limit_bilateral_h(MarketParams(ratio, 1.0, 0.001, 0.5)).constant

        assert const(x) > const(x - 0.05)
        assert const(x) > const(x + 0.05)


class TestCompetingRateThreshold:
    def test_closed_form_value(self):
        got = competing_rate_threshold(1.0, 2.0, 0.5, 1)
        # t = 2*(1 - 0.5) = 1, so the threshold is sqrt(2)/(sqrt(2)-1) = 2+sqrt(2).
        assert got == pytest.approx(2.0 + math.sqrt(2.0), rel=1e-12)

    def test_threshold_exceeds_what_chains_already_remove(self):
        thr = competing_rate_threshold(1.0, 2.0, 0.5, 1)
        assert thr > 2.0 * 0.5

    @pytest.mark.parametrize(
        "args",
        [(0.0, 2.0, 0.5, 1), (1.0, 0.0, 0.5, 1), (1.0, 2.0, 0.0, 1), (1.0, 2.0, 0.5, 0)],
    )
    def test_rejects_bad_arguments(self, args):
        with pytest.raises(ParamError):
            competing_rate_threshold(*args)


class TestMergeGain:
    def test_gain_within_same_scaling(self):
        g = merge_gain(
            MarketParams(1.0, 1.3, 0.02, 0.5), MarketParams(1.0, 1.0, 0.02, 0.5)
        )
        assert not g.regime_changed
        expected = math.log(23.0 / 3.0) - 2.0 * math.log(13.0 / 3.0)
        assert g.gain == pytest.approx(expected, rel=1e-12)
        assert g.gain < 0  # pooling shortens waits here

    def test_merge_can_lengthen_waits(self):
        # Merging pushes the market closer to balanced rates: the hard side
        # stays scarce but its constant grows from ln(2)/0.5 to ln(5)/1.
        g = merge_gain(
            MarketParams(1.0, 2.0, 0.02, 0.5), MarketParams(1.0, 0.5, 0.02, 0.5)
        )
        assert not g.regime_changed
        assert g.gain == pytest.approx(math.log(5.0) - 2.0 * math.log(2.0), rel=1e-12)
        assert g.gain > 0

    def test_scaling_order_worsens_to_plus_infinity(self):
        g = merge_gain(
            MarketParams(1.0, 2.0, 0.02, 0.5), MarketParams(5.0, 0.0, 0.02, 0.5)
        )
        assert g.regime_changed
        assert g.gain == math.inf
        assert g.merged.scaling is Scaling.INV_PH_SQ

    def test_scaling_order_improves_to_minus_infinity(self):
        g = merge_gain(
            MarketParams(3.0, 2.0, 0.02, 0.5), MarketParams(0.0, 5.0, 0.02, 0.5)
        )
        assert g.regime_changed
        assert g.gain == -math.inf
        assert g.merged.scaling is Scaling.INV_PH

    def test_second_market_may_supply_one_side_only(self):
        g = merge_gain(
            MarketParams(1.0, 2.0, 0.02, 0.5), MarketParams(0.0, 1.0, 0.02, 0.5)
        )
        assert g.merged.constant < g.standalone.constant

    def test_mismatched_probabilities_rejected(self):
        with pytest.raises(ParamError):
            merge_gain(
                MarketParams(1.0, 2.0, 0.02, 0.5), MarketParams(1.0, 1.0, 0.02, 0.6)
            )

    def test_empty_second_market_rejected(self):
        with pytest.raises(ParamError):
            merge_gain(
                MarketParams(1.0, 2.0, 0.02, 0.5), MarketParams(0.0, 0.0, 0.02, 0.5)
            )

    def test_negative_second_market_rate_rejected(self):
        with pytest.raises(ParamError):
            merge_gain(
                MarketParams(1.0, 2.0, 0.02, 0.5), MarketParams(-1.0, 3.0, 0.02, 0.5)
            )


class TestDriftSolve:
    def test_hard_priority_root_matches_its_limit(self):
        p = MarketParams(1.0, 2.0, 0.01, 0.5)
        h, e = drift_solve(PolicyKind.BILATERAL_H, p)
        fx, fy = drift_residual(PolicyKind.BILATERAL_H, p, h, e)
        assert max(abs(fx), abs(fy)) <= 1e-10
        assert h == pytest.approx(math.log(2.0) / 0.005, rel=0.10)

    def test_easy_priority_root_matches_its_heuristic(self):
        p = MarketParams(1.0, 2.0, 0.01, 0.5)
        h, e = drift_solve(PolicyKind.BILATERAL_E, p)
        assert h == pytest.approx(math.log(3.0) / 0.005, rel=0.10)

    def test_abundant_hard_side_root(self):
        p = MarketParams(2.0, 1.0, 0.02, 0.5)
        h, e = drift_solve(PolicyKind.BILATERAL_H, p)
        assert h == pytest.approx(math.log(4.0 / 3.0) / 0.02**2, rel=0.02)
        assert e < 1.0

    def test_chain_policy_has_no_two_sided_drift_field(self):
        with pytest.raises(ParamError):
            drift_residual(PolicyKind.CHAIN, MarketParams(1, 2, 0.01, 0.5), 1.0, 1.0)

    def test_negative_counts_rejected(self):
        with pytest.raises(ParamError):
            drift_residual(
                PolicyKind.BILATERAL_H, MarketParams(1, 2, 0.01, 0.5), -1.0, 0.0
            )


def _geometric_walk_spec(**overrides) -> TailBoundSpec:
    """A concrete walk with constant up rate 1 and down rate 2 above zero."""
    base = dict(
        f=lambda x: 1.0,
        g=lambda x: 2.0,
        eta=5,
        k=5,
        rho=0.75,
        epsilon=0.0,
        c=0.0,
        delta=0.0,
    )
    base.update(overrides)
    return TailBoundSpec(**base)


class TestLowerTailBound:
    def test_pure_geometric_part(self):
        # With epsilon = 0 the bound is exactly rho**k / (1 - rho).
        spec = _geometric_walk_spec(f=lambda x: 2.0, g=lambda x: 1.0, rho=0.6)
        got = lemma1_lower_tail_bound(spec)
        assert got == pytest.approx(0.6**5 / 0.4, rel=1e-14)

    def test_exception_probability_term(self):
        spec = _geometric_walk_spec(
            f=lambda x: 2.0, g=lambda x: 1.0, rho=0.6, epsilon=1e-3
        )
        got = lemma1_lower_tail_bound(spec)
        expected = 5 * 1e-3 * (1.0 + 1.0 / (2.0 - 1.0)) + 0.6**5 / 0.4
        assert got == pytest.approx(expected, rel=1e-14)

    def test_decreasing_in_depth(self):
        spec = _geometric_walk_spec(f=lambda x: 2.0, g=lambda x: 1.0, rho=0.6)
        vals = [
            lemma1_lower_tail_bound(dataclasses.replace(spec, k=k))
            for k in (1, 3, 10, 30)
        ]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_requires_drift_gap(self):
        with pytest.raises(BoundConditionError):
            lemma1_lower_tail_bound(_geometric_walk_spec(rho=0.75))  # g/f = 2

    def test_requires_monotone_envelopes(self):
        increasing_f = _geometric_walk_spec(
            f=lambda x: 2.0 + 0.01 * x, g=lambda x: 1.0, rho=0.6
        )
        with pytest.raises(BoundConditionError):
            lemma1_lower_tail_bound(increasing_f)
        decreasing_g = _geometric_walk_spec(
            f=lambda x: 2.0, g=lambda x: 1.0 - 0.001 * x, rho=0.6, check_max=100
        )
        with pytest.raises(BoundConditionError):
            lemma1_lower_tail_bound(decreasing_g)

    def test_requires_positive_up_rate(self):
        spec = _geometric_walk_spec(f=lambda x: 0.0, g=lambda x: 1.0, rho=0.6)
        with pytest.raises(BoundConditionError):
            lemma1_lower_tail_bound(spec)

    def test_rejects_negative_epsilon_and_bad_depth(self):
        with pytest.raises(BoundConditionError):
            lemma1_lower_tail_bound(
                _geometric_walk_spec(f=lambda x: 2.0, g=lambda x: 1.0, rho=0.6, epsilon=-1e-9)
            )
        with pytest.raises(BoundConditionError):
            lemma1_lower_tail_bound(
                _geometric_walk_spec(f=lambda x: 2.0, g=lambda x: 1.0, rho=0.6, k=0)
            )


class TestUpperTailBound:
    def test_pure_geometric_part(self):
        spec = _geometric_walk_spec(rho=0.75)
        got = lemma2_upper_tail_bound(spec)
        assert got == pytest.approx(0.75**5 / 0.25, rel=1e-14)

    def test_exception_series_term(self):
        spec = _geometric_walk_spec(rho=0.75, c=1e-2, delta=0.5)
        got = lemma2_upper_tail_bound(spec)
        expected = 0.75**5 / 0.25 * (1.0 + 1e-2 + 1e-2 * 6 / (2.0 - 1.0))
        assert got == pytest.approx(expected, rel=1e-14)

    def test_requires_ratio_below_rho_everywhere(self):
        spec = _geometric_walk_spec(rho=0.49)  # f/g = 0.5 > rho
        with pytest.raises(BoundConditionError):
            lemma2_upper_tail_bound(spec)

    def test_rejects_bad_exception_parameters(self):
        with pytest.raises(BoundConditionError):
            lemma2_upper_tail_bound(_geometric_walk_spec(c=-1.0))
        with pytest.raises(BoundConditionError):
            lemma2_upper_tail_bound(_geometric_walk_spec(delta=0.9, rho=0.75))
        with pytest.raises(BoundConditionError):
            lemma2_upper_tail_bound(_geometric_walk_spec(eta=0))
