"""Agent-level graph engine and the maximum-segment search."""

import random

import pytest

from dynmatch.core import (
    MarketParams,
    ParamError,
    PolicyKind,
    RunControls,
    SearchBudgetError,
    T_QUANTILE_975_DF19,
)
from dynmatch.counts import run_replica
from dynmatch.graphsim import (
    DEFAULT_CHAIN_BUDGET,
    _segment_ctx,
    _segment_trail,
    _segment_value,
    run_graph_replica,
)


def _brute_force_optimum(n, adj, hmask):
    """Exhaustive search over simple paths from node 0.

    Returns the lexicographic maximum of (hard agents on path, path length)
    and, among optimal paths, the index trail (path without the leading 0)
    with the smallest id sequence.
    """
    best_val = (hmask & 1, 1)
    best_trail = ()

    def rec(cur, vis, h, ln, trail):
        nonlocal best_val, best_trail
        val = (h, ln)
        if val > best_val or (val == best_val and tuple(trail) < best_trail):
            best_val, best_trail = val, tuple(trail)
        nb = adj[cur] & ~vis
        while nb:
            low = nb & -nb
            j = low.bit_length() - 1
            trail.append(j)
            rec(j, vis | low, h + (hmask >> j & 1), ln + 1, trail)
            trail.pop()
            nb ^= low

    rec(0, 1, hmask & 1, 1, [])
    return best_val, best_trail


def _random_instance(rng, n_nodes, p_easy_edge, p_hard_edge, frac_hard):
    """A random directed instance in the engine's normalized form.

    Node 0 is the arrival; no edge re-enters it.  Only nodes reachable from
    0 are kept, re-indexed in ascending order as the engine does.
    """
    hard = [rng.random() < frac_hard for _ in range(n_nodes)]
    raw = [[False] * n_nodes for _ in range(n_nodes)]
    for i in range(n_nodes):
        for j in range(1, n_nodes):
            if i == j:
                continue
            prob = p_hard_edge if hard[j] else p_easy_edge
            raw[i][j] = rng.random() < prob
    reach = {0}
    frontier = [0]
    while frontier:
        i = frontier.pop()
        for j in range(n_nodes):
            if raw[i][j] and j not in reach:
                reach.add(j)
                frontier.append(j)
    ids = sorted(reach)
    pos = {a: k for k, a in enumerate(ids)}
    n = len(ids)
    adj = [0] * n
    hmask = 0
    for k, a in enumerate(ids):
        if hard[a]:
            hmask |= 1 << k
        for b in range(1, n_nodes):
            if raw[a][b] and b in pos:
                adj[k] |= 1 << pos[b]
    return n, adj, hmask


class TestSegmentSearchOracle:
    def _run_case(self, n, adj, hmask):
        spent = 0

        def spend():
            nonlocal spent
            spent += 1
            if spent > 10_000_000:
                raise SearchBudgetError("oracle test budget exceeded")

        expected_val, expected_trail = _brute_force_optimum(n, adj, hmask)
        ctx = _segment_ctx(n, adj, hmask, spend)
        val = _segment_value(ctx, spend)
        assert val == expected_val
        trail = _segment_trail(ctx, val, spend)
        assert tuple(trail) == expected_trail
        # Seeding the value search with the optimum must not change it.
        ctx2 = _segment_ctx(n, adj, hmask, spend)
        assert _segment_value(ctx2, spend, expected_val) == expected_val

    @pytest.mark.parametrize("seed", range(30))
    def test_matches_brute_force_on_random_instances(self, seed):
        rng = random.Random(seed)
        n_nodes = rng.randint(2, 10)
        n, adj, hmask = _random_instance(
            rng,
            n_nodes,
            p_easy_edge=rng.uniform(0.2, 0.8),
            p_hard_edge=rng.uniform(0.1, 0.6),
            frac_hard=rng.uniform(0.1, 0.9),
        )
        self._run_case(n, adj, hmask)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_brute_force_on_dense_hard_clusters(self, seed):
        rng = random.Random(1000 + seed)
        n, adj, hmask = _random_instance(
            rng, 9, p_easy_edge=0.75, p_hard_edge=0.7, frac_hard=0.7
        )
        self._run_case(n, adj, hmask)

    def test_isolated_arrival(self):
        self._run_case(1, [0], 1)
        self._run_case(1, [0], 0)

    def test_single_directed_chain(self):
        # 0 -> 1 -> 2 -> 3 with 1 and 3 hard: the only path takes everything.
        adj = [0b0010, 0b0100, 0b1000, 0]
        val, trail = _brute_force_optimum(4, adj, 0b1010)
        assert val == (2, 4)
        assert trail == (1, 2, 3)
        self._run_case(4, adj, 0b1010)

    def test_prefers_hard_agents_over_longer_paths(self):
        # 0 -> 1 (hard, dead end) versus 0 -> 2 -> 3 (both easy).
        adj = [0b0110, 0, 0b1000, 0]
        val, trail = _brute_force_optimum(4, adj, 0b0010)
        assert val == (1, 2)
        assert trail == (1,)
        self._run_case(4, adj, 0b0010)


class TestGraphReplica:
    P = MarketParams(1.0, 2.0, 0.05, 0.5, d=1)

    def test_deterministic_given_seed(self):
        rc = RunControls(arrivals=2_000, seed=4)
        a = run_graph_replica(PolicyKind.BILATERAL_H, self.P, rc)
        b = run_graph_replica(PolicyKind.BILATERAL_H, self.P, rc)
        assert a == b

    def test_replicas_differ(self):
        rc = RunControls(arrivals=2_000, seed=4)
        a = run_graph_replica(PolicyKind.BILATERAL_H, self.P, rc, replica=0)
        b = run_graph_replica(PolicyKind.BILATERAL_H, self.P, rc, replica=1)
        assert a != b

    def test_direct_sojourns_agree_with_littles_law(self):
        g = run_graph_replica(
            PolicyKind.BILATERAL_H, self.P, RunControls(arrivals=40_000, seed=1)
        )
        assert g.w_h_direct == pytest.approx(
            g.summary.w_h, abs=3.0 * g.summary.ci_half_width_h
        )
        assert g.matched_h > 0 and g.matched_e > 0

    def test_agrees_with_counts_engine(self):
        rc = RunControls(arrivals=30_000, seed=6)
        g = run_graph_replica(PolicyKind.BILATERAL_E, self.P, rc)
        c = run_replica(PolicyKind.BILATERAL_E, self.P, rc)
        combined = (
            g.summary.ci_half_width_h**2 + c.ci_half_width_h**2
        ) ** 0.5
        assert abs(g.summary.w_h - c.w_h) <= 3.0 * combined

    def test_strict_chain_never_queues_easy_agents(self):
        g = run_graph_replica(
            PolicyKind.CHAIN_HAT, self.P, RunControls(arrivals=6_000, seed=2)
        )
        assert g.summary.mean_e == 0.0
        assert g.summary.chain_len_mean_given_positive >= 1.0

    def test_exhaustive_policy_beats_local_search(self):
        p = MarketParams(2.0, 2.0, 0.002, 0.5, d=1)
        rc = RunControls(arrivals=8_000, seed=5)
        best = run_graph_replica(PolicyKind.MAX_CHAINS, p, rc)
        local = run_graph_replica(PolicyKind.CHAIN, p, rc)
        assert best.summary.w_h <= local.summary.w_h
        assert 0 < best.search_expansions_max <= DEFAULT_CHAIN_BUDGET

    def test_search_budget_is_enforced(self):
        p = MarketParams(2.0, 2.0, 0.002, 0.5, d=1)
        with pytest.raises(SearchBudgetError):
            run_graph_replica(
                PolicyKind.MAX_CHAINS,
                p,
                RunControls(arrivals=4_000, seed=0),
                chain_budget=200,
            )

    @pytest.mark.parametrize(
        "policy",
        [
            PolicyKind.BILATERAL_H,
            PolicyKind.BILATERAL_E,
            PolicyKind.CHAIN,
            PolicyKind.CHAIN_HAT,
            PolicyKind.MAX_CHAINS,
        ],
    )
    def test_debug_invariants_hold_on_short_runs(self, policy):
        p = MarketParams(1.0, 2.0, 0.2, 0.6, d=2)
        run_graph_replica(policy, p, RunControls(arrivals=400, seed=3), debug=True)

    def test_counts_only_policy_rejected(self):
        with pytest.raises(ParamError):
            run_graph_replica(
                PolicyKind.BILATERAL_E_TILDE, self.P, RunControls(arrivals=400, seed=0)
            )
