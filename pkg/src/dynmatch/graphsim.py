"""Agent-level simulation with explicit compatibility graphs.

Unlike the counts engine, this engine tracks every agent and samples the
full directed compatibility graph: when an agent arrives, both coins of
every ordered pair it forms with a present agent are drawn immediately and
persisted (an edge i -> j means j can receive from i, drawn with the
receiver's compatibility probability).  Myopic policies inspect each pair at
most once, so simulating on waiting counts or on the sampled graph yields
the same law; this engine exists to validate that and to run policies that
genuinely need the graph, such as exhaustive maximum-segment chains.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Set, Tuple

import numpy as np

from .core import (
    MarketParams,
    ParamError,
    PolicyKind,
    RunControls,
    SearchBudgetError,
    SimSummary,
    batch_mean_ci,
    little_law,
    replica_sequences,
    validate_controls,
    validate_params,
)

__all__ = [
    "Agent",
    "ChainPath",
    "CompatibilityGraph",
    "GraphSummary",
    "run_graph_replica",
    "DEFAULT_CHAIN_BUDGET",
]

DEFAULT_CHAIN_BUDGET = 10_000_000

# Expansions granted to the incumbent value search before the maximum-segment
# search falls back to its exact dynamic program (see match_chain_max).
_VALUE_SLICE = 200_000


class _SliceExhausted(Exception):
    """Internal: incumbent value search used up its expansion slice."""


@dataclass
class _SegmentCtx:
    """Bitmask view of one maximum-segment search instance.

    Index 0 is the arrival; ``hubs`` are the easy agents plus the arrival.
    Hard agents connected by hard-hard edges form ``comps`` (clusters); a
    path can only enter a cluster at a port (a hard agent some hub points
    to), run inside it, and leave to an unvisited hub, so cluster visits
    ("dives") are summarized by per-port tables mapping an exit hub slot
    (or -1 for ending inside) and an overlap key to the best node count.
    Keys are the route's intersection with ``fr`` of the entry port — the
    region other ports can also reach — which is exactly the part of a
    route later dives could collide with.
    """

    n: int
    adj: List[int]
    hmask: int
    full: int
    hard_wait: int
    hubs_mask: int
    hubs: List[int]
    hub_slot: Dict[int, int]
    m: int
    comps: List[int]
    caps: List[int]
    total_caps: int
    cluster_of: Dict[int, int]
    multi: List[int]
    slot_of_cluster: Dict[int, int]
    port_bit: Dict[int, int]
    fr: Dict[int, int]
    dive_tables: Dict[int, Dict[int, List[Tuple[int, int]]]]
    hub_dives: List[List[Tuple[int, int, int, Dict[int, List[Tuple[int, int]]]]]]
    hub_adj: List[int]
    owner_slots: List[int]
    dead_cache: Dict[int, int]

    def completion_bound(self, vis: int, slot: int, prof: Tuple[int, ...]) -> Tuple[int, int]:
        """Admissible (H, length) bound on any completion of a prefix."""
        visited_hubs = vis & ~(1 << slot)
        dead = self.dead_cache.get(visited_hubs)
        if dead is None:
            dead = 0
            for k in range(len(self.comps)):
                if self.owner_slots[k] & ~visited_hubs == 0:
                    dead += self.caps[k]
            self.dead_cache[visited_hubs] = dead
        take = self.total_caps - dead
        for s, k in enumerate(self.multi):
            if self.owner_slots[k] & ~visited_hubs == 0:
                continue
            cap = self.caps[k]
            rem = (self.comps[k] & ~prof[1 + s]).bit_count()
            if rem < cap:
                take -= cap - rem
        return take, take + self.m - vis.bit_count()


def _segment_ctx(n: int, adj: List[int], hmask: int, spend) -> _SegmentCtx:
    """Build the cluster/port/dive-table view used by the exact fallback."""
    full = (1 << n) - 1
    hard_wait = hmask & ~1
    hubs_mask = (full & ~hmask) | 1
    hubs: List[int] = []
    scan = hubs_mask
    while scan:
        low = scan & -scan
        hubs.append(low.bit_length() - 1)
        scan ^= low
    hub_slot = {j: s for s, j in enumerate(hubs)}

    undirected = [0] * n
    scan = hard_wait
    while scan:
        low = scan & -scan
        i = low.bit_length() - 1
        hh = adj[i] & hard_wait
        undirected[i] |= hh
        while hh:
            lo2 = hh & -hh
            undirected[lo2.bit_length() - 1] |= low
            hh ^= lo2
        scan ^= low
    owner_count: Dict[int, int] = {}
    for j in hubs:
        ports_j = adj[j] & hard_wait
        while ports_j:
            low = ports_j & -ports_j
            q = low.bit_length() - 1
            owner_count[q] = owner_count.get(q, 0) + 1
            ports_j ^= low
    comps: List[int] = []
    caps: List[int] = []
    cluster_of: Dict[int, int] = {}
    down: Dict[int, int] = {}

    def longest_hard(cur: int, mask: int) -> int:
        spend()
        val = 0
        nb = adj[cur] & mask
        while nb:
            low = nb & -nb
            ext = longest_hard(low.bit_length() - 1, mask ^ low)
            if ext > val:
                val = ext
            nb ^= low
        return 1 + val

    left = hard_wait
    while left:
        low = left & -left
        comp = low
        frontier = low
        while frontier:
            nxt = 0
            while frontier:
                lo2 = frontier & -frontier
                nxt |= undirected[lo2.bit_length() - 1]
                frontier ^= lo2
            frontier = nxt & hard_wait & ~comp
            comp |= frontier
        left &= ~comp
        k = len(comps)
        comps.append(comp)
        scan2 = comp
        while scan2:
            lo2 = scan2 & -scan2
            j = lo2.bit_length() - 1
            cluster_of[j] = k
            down[j] = longest_hard(j, comp ^ lo2)
            scan2 ^= lo2
    cports: List[List[int]] = [[] for _ in comps]
    for q in owner_count:
        cports[cluster_of[q]].append(q)
    for k, comp in enumerate(comps):
        ps = cports[k]
        caps.append(down[ps[0]] if len(ps) == 1 else comp.bit_count())
    multi = [k for k, ps in enumerate(cports) if len(ps) > 1]
    slot_of_cluster = {k: s for s, k in enumerate(multi)}
    shared = [q for q, c in owner_count.items() if c > 1]
    port_bit = {q: i for i, q in enumerate(shared)}

    def dreach(q: int, comp: int) -> int:
        got = adj[q] & comp
        frontier = got
        while frontier:
            nxt = 0
            while frontier:
                low = frontier & -frontier
                nxt |= adj[low.bit_length() - 1]
                frontier ^= low
            frontier = nxt & comp & ~got
            got |= frontier
        return got | (1 << q)

    fr: Dict[int, int] = {}
    for k, ps in enumerate(cports):
        if len(ps) < 2:
            for q in ps:
                fr[q] = dreach(q, comps[k]) if q in port_bit else 0
            continue
        reaches = {q: dreach(q, comps[k]) for q in ps}
        for q in ps:
            other = 0
            for q2 in ps:
                if q2 != q:
                    other |= reaches[q2]
            if q in port_bit:
                other |= reaches[q]
            fr[q] = other

    def enum_routes(q: int, comp: int) -> Dict[int, List[Tuple[int, int]]]:
        raw: Dict[Tuple[int, int], int] = {}
        frq = fr[q]

        def visit(cur: int, mask: int, used: int, nodes: int) -> None:
            spend()
            key = used & frq
            exits = adj[cur] & hubs_mask
            while exits:
                low = exits & -exits
                slot = hub_slot[low.bit_length() - 1]
                if raw.get((slot, key), 0) < nodes:
                    raw[slot, key] = nodes
                exits ^= low
            if raw.get((-1, key), 0) < nodes:
                raw[-1, key] = nodes
            nb = adj[cur] & mask
            while nb:
                low = nb & -nb
                visit(low.bit_length() - 1, mask ^ low, used | low, nodes + 1)
                nb ^= low

        visit(q, comp & ~(1 << q), 1 << q, 1)
        table: Dict[int, List[Tuple[int, int]]] = {}
        for (slot, key), nodes in raw.items():
            table.setdefault(slot, []).append((key, nodes))
        for lst in table.values():
            lst.sort(key=lambda kn: -kn[1])
        return table

    dive_tables = {q: enum_routes(q, comps[cluster_of[q]]) for q in owner_count}
    hub_dives = []
    for j in hubs:
        lst = []
        scan = adj[j] & hard_wait
        while scan:
            low = scan & -scan
            q = low.bit_length() - 1
            lst.append(
                (
                    q,
                    port_bit.get(q, -1),
                    slot_of_cluster.get(cluster_of[q], -1),
                    dive_tables[q],
                )
            )
            scan ^= low
        hub_dives.append(lst)
    hub_adj = [0] * len(hubs)
    owner_slots = [0] * len(comps)
    for s, j in enumerate(hubs):
        nb = adj[j] & hubs_mask
        sm = 0
        while nb:
            low = nb & -nb
            sm |= 1 << hub_slot[low.bit_length() - 1]
            nb ^= low
        hub_adj[s] = sm
        scan = adj[j] & hard_wait
        while scan:
            low = scan & -scan
            owner_slots[cluster_of[low.bit_length() - 1]] |= 1 << s
            scan ^= low
    return _SegmentCtx(
        n=n,
        adj=adj,
        hmask=hmask,
        full=full,
        hard_wait=hard_wait,
        hubs_mask=hubs_mask,
        hubs=hubs,
        hub_slot=hub_slot,
        m=len(hubs),
        comps=comps,
        caps=caps,
        total_caps=sum(caps),
        cluster_of=cluster_of,
        multi=multi,
        slot_of_cluster=slot_of_cluster,
        port_bit=port_bit,
        fr=fr,
        dive_tables=dive_tables,
        hub_dives=hub_dives,
        hub_adj=hub_adj,
        owner_slots=owner_slots,
        dead_cache={},
    )


def _segment_value(
    ctx: _SegmentCtx, spend, incumbent: Optional[Tuple[int, int]] = None
) -> Tuple[int, int]:
    """Exact optimum (H count, length) by layered DP over hub subsets.

    States are (visited hubs, position, profile); the profile carries one
    used bit per shared port and, per multi-port cluster, the overlap
    region its dives consumed.  Dive options are Pareto-pruned (a route
    consuming more while collecting fewer nodes is dropped) and states are
    merged under profile-and-value dominance — both safe for the value.
    An admissible completion bound retires states that cannot strictly
    beat the incumbent; ``incumbent`` may seed it with a value already
    realized by some path.
    """
    root_h = ctx.hmask & 1
    hub_adj = ctx.hub_adj
    pruned: Dict[int, Dict[int, List[Tuple[int, int]]]] = {}
    for q, table in ctx.dive_tables.items():
        pt: Dict[int, List[Tuple[int, int]]] = {}
        for slot, lst in table.items():
            kept: List[Tuple[int, int]] = []
            for key, nodes in lst:  # sorted by descending nodes
                if not any(k2 & key == k2 and n2 >= nodes for k2, n2 in kept):
                    kept.append((key, nodes))
            pt[slot] = kept
        pruned[q] = pt
    hub_dives = [
        [(q, pbit, mslot, pruned[q]) for q, pbit, mslot, _ in lst]
        for lst in ctx.hub_dives
    ]
    empty_prof = (0,) * (1 + len(ctx.multi))
    best = (root_h, 1)
    if incumbent is not None and incumbent > best:
        best = incumbent
    frontier: Dict[Tuple[int, int], List] = {
        (1, 0): [(empty_prof, (root_h, 1))]
    }
    while frontier:
        nxt_layer: Dict[Tuple[int, int], List] = {}

        def push(vis: int, slot: int, prof: Tuple[int, ...], val: Tuple[int, int]) -> None:
            nonlocal best
            if val > best:
                best = val
            uh, ul = ctx.completion_bound(vis, slot, prof)
            if val[0] + uh < best[0] or (
                val[0] + uh == best[0] and val[1] + ul <= best[1]
            ):
                return  # cannot strictly improve the incumbent
            key = (vis, slot)
            lst = nxt_layer.get(key)
            if lst is None:
                nxt_layer[key] = [(prof, val)]
                return
            for prof2, val2 in lst:
                if val2 >= val and all(
                    p2 & p1 == p2 for p1, p2 in zip(prof, prof2)
                ):
                    return
            lst[:] = [
                (prof2, val2)
                for prof2, val2 in lst
                if not (
                    val >= val2
                    and all(p1 & p2 == p1 for p1, p2 in zip(prof, prof2))
                )
            ]
            lst.append((prof, val))

        for (vis, slot), plist in frontier.items():
            nbmask = hub_adj[slot] & ~vis
            dives = hub_dives[slot]
            for prof, (h, ln) in plist:
                spend()
                nb = nbmask
                while nb:
                    low = nb & -nb
                    s2 = low.bit_length() - 1
                    nb ^= low
                    push(vis | low, s2, prof, (h, ln + 1))
                for q, pbit, mslot, table in dives:
                    if pbit >= 0 and prof[0] >> pbit & 1:
                        continue
                    blocked = prof[1 + mslot] if mslot >= 0 else 0
                    if blocked >> q & 1:
                        continue
                    for exit_slot, options in table.items():
                        if exit_slot >= 0 and vis >> exit_slot & 1:
                            continue
                        for key, nodes in options:
                            if key & blocked:
                                continue
                            if exit_slot < 0:
                                val = (h + nodes, ln + nodes)
                                if val > best:
                                    best = val
                                break  # longest legal option found
                            if pbit < 0 and mslot < 0:
                                prof2 = prof
                            else:
                                pl = list(prof)
                                if pbit >= 0:
                                    pl[0] |= 1 << pbit
                                if mslot >= 0:
                                    pl[1 + mslot] |= key
                                prof2 = tuple(pl)
                            push(
                                vis | 1 << exit_slot,
                                exit_slot,
                                prof2,
                                (h + nodes, ln + nodes + 1),
                            )
                            if mslot < 0:
                                # key never enters the profile, so the
                                # longest legal option dominates the rest
                                break
        frontier = nxt_layer
    return best


def _segment_trail(ctx: _SegmentCtx, opt: Tuple[int, int], spend) -> List[int]:
    """Ascending-id walk realizing the first (lowest-id) optimal path.

    Each candidate step is vetted exactly against the best completion of
    the state it leads to, computed on demand by a memoized search.  Every
    queried state is reached by some genuine prefix, so by optimality of
    ``opt`` no completion can exceed the value still needed — the search
    may stop as soon as it matches that ceiling and the ceiling value is
    the exact maximum.  A vetted step always extends to the optimum, so
    the walk never backtracks.
    """
    opt_h, opt_len = opt
    adj = ctx.adj
    hmask = ctx.hmask
    hubs_mask = ctx.hubs_mask
    hub_slot = ctx.hub_slot
    hub_adj = ctx.hub_adj
    hub_dives = ctx.hub_dives
    cluster_of = ctx.cluster_of
    multi_slot = ctx.slot_of_cluster
    port_bit = ctx.port_bit
    fr = ctx.fr
    hubs = ctx.hubs
    trail: List[int] = []
    hub_bits: Dict[int, int] = {}
    memo: Dict[Tuple[int, int, Tuple[int, ...]], Tuple[int, int]] = {}

    def comp(
        vis: int, slot: int, prof: Tuple[int, ...], ceil_h: int, ceil_l: int
    ) -> Tuple[int, int]:
        """Exact best (H, length) completion of a state, memoized."""
        st = (vis, slot, prof)
        got = memo.get(st)
        if got is not None:
            return got
        spend()
        best_h, best_l = 0, 0
        for q, pbit, mslot, table in hub_dives[slot]:
            if (best_h, best_l) >= (ceil_h, ceil_l):
                break
            if pbit >= 0 and prof[0] >> pbit & 1:
                continue
            blocked = prof[1 + mslot] if mslot >= 0 else 0
            if blocked >> q & 1:
                continue
            for exit_slot, options in table.items():
                if exit_slot < 0:
                    for key, nodes in options:
                        if key & blocked:
                            continue
                        if (nodes, nodes) > (best_h, best_l):
                            best_h, best_l = nodes, nodes
                        break  # sorted: first legal option is longest
                    continue
                if vis >> exit_slot & 1:
                    continue
                vis2 = vis | 1 << exit_slot
                for key, nodes in options:
                    if key & blocked:
                        continue
                    if pbit < 0 and mslot < 0:
                        prof2 = prof
                    else:
                        pl = list(prof)
                        if pbit >= 0:
                            pl[0] |= 1 << pbit
                        if mslot >= 0:
                            pl[1 + mslot] |= key
                        prof2 = tuple(pl)
                    uh, ul = ctx.completion_bound(vis2, exit_slot, prof2)
                    ch = nodes + uh
                    if ch < best_h or (
                        ch == best_h and nodes + 1 + ul <= best_l
                    ):
                        if mslot < 0:
                            break
                        continue
                    sub = comp(
                        vis2, exit_slot, prof2,
                        ceil_h - nodes, ceil_l - nodes - 1,
                    )
                    cand = (nodes + sub[0], nodes + 1 + sub[1])
                    if cand > (best_h, best_l):
                        best_h, best_l = cand
                    if mslot < 0:
                        # key never enters the profile, so the longest
                        # legal option dominates the rest
                        break
        nb = hub_adj[slot] & ~vis
        while nb and (best_h, best_l) < (ceil_h, ceil_l):
            low = nb & -nb
            s2 = low.bit_length() - 1
            nb ^= low
            uh, ul = ctx.completion_bound(vis | low, s2, prof)
            if uh < best_h or (uh == best_h and 1 + ul <= best_l):
                continue
            sub = comp(vis | low, s2, prof, ceil_h, ceil_l - 1)
            cand = (sub[0], sub[1] + 1)
            if cand > (best_h, best_l):
                best_h, best_l = cand
        memo[st] = (best_h, best_l)
        return best_h, best_l

    def visited_hub_ids(vis: int) -> int:
        got = hub_bits.get(vis)
        if got is None:
            got = 0
            scan = vis
            while scan:
                low = scan & -scan
                got |= 1 << hubs[low.bit_length() - 1]
                scan ^= low
            hub_bits[vis] = got
        return got

    def prof_after(prof: Tuple[int, ...], q: int, route: int) -> Tuple[int, ...]:
        pbit = port_bit.get(q, -1)
        mslot = multi_slot.get(cluster_of[q], -1)
        if pbit < 0 and mslot < 0:
            return prof
        pl = list(prof)
        if pbit >= 0:
            pl[0] |= 1 << pbit
        if mslot >= 0:
            pl[1 + mslot] |= route & fr[q]
        return tuple(pl)

    def dive_ok(
        x: int,
        route: int,
        q: int,
        vis: int,
        prof: Tuple[int, ...],
        h: int,
        ln: int,
        avail: int,
    ) -> bool:
        spend()
        if (h, ln) == (opt_h, opt_len):
            return True
        need_h, need_l = opt_h - h, opt_len - ln - 1
        prof2 = prof_after(prof, q, route)
        exits = adj[x] & hubs_mask & ~visited_hub_ids(vis)
        while exits:
            low = exits & -exits
            s2 = hub_slot[low.bit_length() - 1]
            exits ^= low
            if comp(vis | 1 << s2, s2, prof2, need_h, need_l) == (
                need_h,
                need_l,
            ):
                return True
        nb = adj[x] & avail & ctx.comps[cluster_of[q]]
        while nb:
            low = nb & -nb
            y = low.bit_length() - 1
            nb ^= low
            if dive_ok(y, route | low, q, vis, prof, h + 1, ln + 1, avail & ~low):
                return True
        return False

    def walk(
        cur: int,
        vis: int,
        prof: Tuple[int, ...],
        h: int,
        ln: int,
        avail: int,
        in_dive: Optional[Tuple[int, int]],
    ) -> None:
        spend()
        if (h, ln) == (opt_h, opt_len):
            return
        nb = adj[cur] & avail
        while nb:
            low = nb & -nb
            j = low.bit_length() - 1
            nb ^= low
            if low & hmask:
                if in_dive is None:
                    q, route = j, low
                else:
                    q, route = in_dive[0], in_dive[1] | low
                if dive_ok(j, route, q, vis, prof, h + 1, ln + 1, avail & ~low):
                    trail.append(j)
                    walk(j, vis, prof, h + 1, ln + 1, avail & ~low, (q, route))
                    return
            else:
                s2 = hub_slot[j]
                prof2 = (
                    prof
                    if in_dive is None
                    else prof_after(prof, in_dive[0], in_dive[1])
                )
                keep = (h, ln + 1) == (opt_h, opt_len)
                if not keep:
                    need_h, need_l = opt_h - h, opt_len - ln - 1
                    keep = comp(vis | 1 << s2, s2, prof2, need_h, need_l) == (
                        need_h,
                        need_l,
                    )
                if keep:
                    trail.append(j)
                    walk(j, vis | 1 << s2, prof2, h, ln + 1, avail & ~low, None)
                    return
        raise RuntimeError("optimal segment value not realized by a path")

    walk(0, 1, (0,) * (1 + len(ctx.multi)), ctx.hmask & 1, 1, ctx.full & ~1, None)
    return trail


@dataclass
class Agent:
    """One market participant; ids are unique and increase with arrival."""

    id: int
    agent_type: Literal["H", "E"]
    arrival_epoch: int
    is_bridge: bool = False


@dataclass(frozen=True)
class ChainPath:
    """A chain segment: the giving bridge followed by the matched agents."""

    ids: Tuple[int, ...]
    h_count: int  # H agents matched on the path (bridge excluded)
    e_count: int

    def __post_init__(self) -> None:
        if len(self.ids) < 2:
            raise ParamError("a chain path needs a bridge and at least one agent")

    @property
    def length(self) -> int:
        """Number of matched agents (the starting bridge gives, not receives)."""
        return len(self.ids) - 1


class CompatibilityGraph:
    """Agents present in the market and the directed edges among them.

    Waiting agents are kept in insertion (= id) order; edges of departed
    agents are pruned so the graph only ever holds live pairs.  With
    ``debug=True`` every sampled ordered pair is remembered and re-sampling
    one raises, and the policy invariants are asserted each epoch.
    """

    def __init__(self, debug: bool = False):
        self.agents: Dict[int, Agent] = {}
        self.waiting_h: Dict[int, None] = {}
        self.waiting_e: Dict[int, None] = {}
        self.bridges: Dict[int, None] = {}
        self.out_edges: Dict[int, Set[int]] = {}
        self.in_edges: Dict[int, Set[int]] = {}
        self.debug = debug
        self.last_search_expansions = 0
        self._sampled_pairs: Set[Tuple[int, int]] = set()
        self._next_id = 0

    # -- population management -------------------------------------------

    def counts(self) -> Tuple[int, int]:
        return len(self.waiting_h), len(self.waiting_e)

    def present_ids(self) -> List[int]:
        return list(self.waiting_h) + list(self.waiting_e) + list(self.bridges)

    def add_bridge_seed(self, epoch: int = -1) -> Agent:
        """Insert an altruistic item holder (type is irrelevant: it only gives)."""
        agent = Agent(self._next_id, "H", epoch, is_bridge=True)
        self._next_id += 1
        self.agents[agent.id] = agent
        self.bridges[agent.id] = None
        self.out_edges[agent.id] = set()
        self.in_edges[agent.id] = set()
        return agent

    def arrive(
        self,
        agent_type: Literal["H", "E"],
        epoch: int,
        p: MarketParams,
        gen: np.random.Generator,
    ) -> Agent:
        """Add an arrival and sample both coins of every pair it creates."""
        agent = Agent(self._next_id, agent_type, epoch)
        self._next_id += 1
        others = self.present_ids()
        out: Set[int] = set()
        inn: Set[int] = set()
        if others:
            # Coin 1 per pair: can the existing agent receive from the new one?
            recv_probs = np.fromiter(
                (p.p_h if self.agents[j].agent_type == "H" else p.p_e for j in others),
                dtype=float,
                count=len(others),
            )
            hits_out = gen.random(len(others)) < recv_probs
            # Coin 2 per pair: can the new agent receive from the existing one?
            p_new = p.p_h if agent_type == "H" else p.p_e
            hits_in = gen.random(len(others)) < p_new
            for j, ho, hi in zip(others, hits_out, hits_in):
                if self.debug:
                    pair = (j, agent.id)
                    if pair in self._sampled_pairs:
                        raise AssertionError(f"pair {pair} sampled twice")
                    self._sampled_pairs.add(pair)
                if ho:
                    out.add(j)
                    self.in_edges[j].add(agent.id)
                if hi:
                    inn.add(j)
                    self.out_edges[j].add(agent.id)
        self.agents[agent.id] = agent
        self.out_edges[agent.id] = out
        self.in_edges[agent.id] = inn
        return agent

    def join_waiting(self, agent: Agent) -> None:
        pool = self.waiting_h if agent.agent_type == "H" else self.waiting_e
        pool[agent.id] = None

    def remove(self, agent_id: int) -> None:
        """Take an agent out of the market and prune every edge touching it.

        The agent's record stays in ``agents`` (callers read arrival epochs
        of departed agents); only its edges and pool memberships go.
        """
        for j in self.out_edges.pop(agent_id, ()):
            self.in_edges[j].discard(agent_id)
        for j in self.in_edges.pop(agent_id, ()):
            self.out_edges[j].discard(agent_id)
        self.waiting_h.pop(agent_id, None)
        self.waiting_e.pop(agent_id, None)
        self.bridges.pop(agent_id, None)

    def promote_to_bridge(self, agent_id: int) -> None:
        self.waiting_h.pop(agent_id, None)
        self.waiting_e.pop(agent_id, None)
        self.bridges[agent_id] = None
        self.agents[agent_id].is_bridge = True

    # -- matching moves -----------------------------------------------------

    def mutual_partners(self, agent_id: int, pool: Dict[int, None]) -> List[int]:
        """Waiting agents two-way compatible with the given agent, by id."""
        givers = self.out_edges[agent_id]
        return sorted(
            j for j in givers & pool.keys() if agent_id in self.out_edges[j]
        )

    def match_bilateral(
        self, agent: Agent, priority: Literal["H", "E"], rng: random.Random
    ) -> Optional[int]:
        """Two-way match for an arrival, trying the priority pool first.

        Returns the partner id (uniform among the prioritized candidates),
        or None if the arrival joins its waiting pool.
        """
        pools = (self.waiting_h, self.waiting_e)
        if priority == "E":
            pools = (self.waiting_e, self.waiting_h)
        for pool in pools:
            cands = self.mutual_partners(agent.id, pool)
            if cands:
                partner = cands[rng.randrange(len(cands))]
                self.remove(partner)
                self.remove(agent.id)
                return partner
        self.join_waiting(agent)
        return None

    def _eligible_bridges(self, agent_id: int) -> List[int]:
        return sorted(b for b in self.bridges if agent_id in self.out_edges[b])

    def match_chain_local(
        self, agent: Agent, rng: random.Random
    ) -> Optional[ChainPath]:
        """Greedy segment from a uniform eligible bridge, waiting H first.

        At every hop the next receiver is uniform among waiting H agents the
        current holder can give to, falling back to waiting E agents; the
        segment stops when neither pool is reachable and its last agent
        becomes the new bridge.  Returns None when no bridge can give to the
        arrival (the arrival then joins its pool or, under the strict
        variant handled by the caller, leaves).
        """
        bridges = self._eligible_bridges(agent.id)
        if not bridges:
            return None
        start = bridges[rng.randrange(len(bridges))]
        path = [start, agent.id]
        consumed: Set[int] = {agent.id}
        h_count = 1 if agent.agent_type == "H" else 0
        e_count = 1 - h_count
        cur = agent.id
        while True:
            nxt = self._segment_candidates(cur, consumed, rng)
            if nxt is None:
                break
            path.append(nxt)
            consumed.add(nxt)
            if self.agents[nxt].agent_type == "H":
                h_count += 1
            else:
                e_count += 1
            cur = nxt
        self._apply_chain(path)
        return ChainPath(ids=tuple(path), h_count=h_count, e_count=e_count)

    def _segment_candidates(
        self, cur: int, consumed: Set[int], rng: random.Random
    ) -> Optional[int]:
        for pool in (self.waiting_h, self.waiting_e):
            cands = sorted((self.out_edges[cur] & pool.keys()) - consumed)
            if cands:
                return cands[rng.randrange(len(cands))]
        return None

    def match_chain_max(
        self, agent: Agent, budget: int = DEFAULT_CHAIN_BUDGET
    ) -> Optional[ChainPath]:
        """Exhaustive segment search maximizing (H matched, length).

        Considers every simple path from the arrival through waiting agents
        and returns an optimum under the lexicographic objective (hard
        matches first, then total length), breaking ties toward the path
        whose id sequence is lexicographically smallest.  Two passes over a
        bitmask encoding of the reachable subgraph keep that exact:

        1. value pass — depth-first search visiting deepest hard agents
           first so a strong incumbent appears early.  A branch is cut when
           its optimistic completion cannot strictly beat the incumbent.
           The H side of that bound exploits sparsity: hard agents reachable
           only through other hard agents form small connected clusters, and
           one simple path cannot take more from a cluster than the longest
           path from its entry point, which is far below the cluster size
           when the cluster branches.  Once only easy agents remain
           reachable the H count is settled and the best completion is a
           longest path in that remainder, solved by memoized recursion on
           (agent, remaining set) so permutations of the same remainder are
           costed once.  The search runs under an expansion slice; the rare
           instance too dense for it falls through to an exact dynamic
           program whose states are (visited easy agents, position, hard
           cluster usage) and whose transitions hop between easy agents or
           dive through a hard cluster and back out.
        2. path pass — ascending-id depth-first search for the first path
           achieving the optimal value, which is the lowest-id optimum.
           After a fallback the walk is instead vetted step by step
           against exact best-completion values computed on demand, which
           realizes the same lowest-id optimum without backtracking.

        Raises SearchBudgetError past ``budget`` node expansions (both
        passes, the memoized recursion, and the cluster preprocessing all
        count toward the budget).
        """
        bridges = self._eligible_bridges(agent.id)
        if not bridges:
            return None
        # Compact universe: index 0 is the arrival, then reachable waiting
        # agents in ascending-id order, so ascending-index iteration of the
        # neighbor masks is ascending-id iteration.
        seen: Set[int] = set()
        stack = [agent.id]
        while stack:
            for nxt in self.out_edges[stack.pop()]:
                if nxt not in seen and (
                    nxt in self.waiting_h or nxt in self.waiting_e
                ):
                    seen.add(nxt)
                    stack.append(nxt)
        ids = [agent.id, *sorted(seen)]
        pos = {a: i for i, a in enumerate(ids)}
        n = len(ids)
        adj = [0] * n
        hmask = 1 if agent.agent_type == "H" else 0
        for i, a in enumerate(ids):
            if i and a in self.waiting_h:
                hmask |= 1 << i
            mask = 0
            for nxt in self.out_edges[a]:
                j = pos.get(nxt)
                if j:  # the arrival (index 0) is never re-entered
                    mask |= 1 << j
            adj[i] = mask
        full = (1 << n) - 1
        root_h = hmask & 1
        exp = 0

        def spend() -> None:
            nonlocal exp
            exp += 1
            if exp > budget:
                raise SearchBudgetError(
                    f"maximum-segment search exceeded {budget} node expansions"
                )

        def reach_from(cur: int, avail: int) -> int:
            got = adj[cur] & avail
            frontier = got
            while frontier:
                nxt = 0
                while frontier:
                    low = frontier & -frontier
                    nxt |= adj[low.bit_length() - 1]
                    frontier ^= low
                frontier = nxt & avail & ~got
                got |= frontier
            return got

        # Clusters of waiting hard agents connected by hard-hard edges.  A
        # simple path enters a cluster only at a port (a hard agent some
        # easy agent or the arrival can give to) and hard-hard edges never
        # leave the cluster, so no path collects more than the longest
        # simple path from a port — computed exactly here, the clusters
        # being small.  ``down[x]`` is the longest path from x inside its
        # cluster and drives child ordering; a multi-port cluster falls
        # back to its size, since two visits through distinct ports can
        # together exceed any single-port cap.
        hard_wait = hmask & ~1
        clusters: List[Tuple[int, int]] = []  # (cluster mask, path cap)
        down = [1] * n

        def longest_hard(cur: int, mask: int) -> int:
            spend()
            val = 0
            nb = adj[cur] & mask
            while nb:
                low = nb & -nb
                ext = longest_hard(low.bit_length() - 1, mask ^ low)
                if ext > val:
                    val = ext
                nb ^= low
            return 1 + val

        if hard_wait:
            ports = 0
            scan = full & ~hard_wait
            while scan:
                low = scan & -scan
                ports |= adj[low.bit_length() - 1]
                scan ^= low
            ports &= hard_wait
            undirected = [0] * n
            scan = hard_wait
            while scan:
                low = scan & -scan
                i = low.bit_length() - 1
                hh = adj[i] & hard_wait
                undirected[i] |= hh
                while hh:
                    lo2 = hh & -hh
                    undirected[lo2.bit_length() - 1] |= low
                    hh ^= lo2
                scan ^= low
            left = hard_wait
            while left:
                low = left & -left
                comp = low
                frontier = low
                while frontier:
                    nxt = 0
                    while frontier:
                        lo2 = frontier & -frontier
                        nxt |= undirected[lo2.bit_length() - 1]
                        frontier ^= lo2
                    frontier = nxt & hard_wait & ~comp
                    comp |= frontier
                left &= ~comp
                scan = comp
                while scan:
                    lo2 = scan & -scan
                    j = lo2.bit_length() - 1
                    down[j] = longest_hard(j, comp ^ lo2)
                    scan ^= lo2
                cports = comp & ports
                if cports and cports == (cports & -cports):
                    cap = down[cports.bit_length() - 1]
                else:
                    cap = comp.bit_count()
                clusters.append((comp, cap))

        def bound(base_h: int, base_len: int, rmask: int) -> Tuple[int, int]:
            take = 0
            for comp, cap in clusters:
                inter = (rmask & comp).bit_count()
                take += inter if inter < cap else cap
            return base_h + take, base_len + (rmask & ~hmask).bit_count() + take

        memo: Dict[Tuple[int, int], int] = {}

        def longest_easy(cur: int, mask: int) -> int:
            val = memo.get((cur, mask))
            if val is not None:
                return val
            spend()
            val = 0
            nb = adj[cur] & mask
            while nb:
                low = nb & -nb
                ext = 1 + longest_easy(low.bit_length() - 1, mask ^ low)
                if ext > val:
                    val = ext
                nb ^= low
            memo[cur, mask] = val
            return val

        best_h, best_len = root_h, 1
        slice_limit = exp + _VALUE_SLICE

        def dfs_value(
            cur: int, cur_h: int, cur_len: int, avail: int, outer: int
        ) -> None:
            nonlocal best_h, best_len
            spend()
            if exp > slice_limit:
                raise _SliceExhausted
            if (cur_h, cur_len) > (best_h, best_len):
                best_h, best_len = cur_h, cur_len
            # Cheap bound first (parent's reachable set), exact bound only
            # when the cheap one fails to prune; both are supersets of what
            # any extension can still collect, so pruning on them is safe.
            loose = outer & avail
            if bound(cur_h, cur_len, loose) <= (best_h, best_len):
                return
            rmask = reach_from(cur, avail)
            if rmask != loose and bound(cur_h, cur_len, rmask) <= (
                best_h,
                best_len,
            ):
                return
            if not rmask & hmask:
                ext = cur_len + longest_easy(cur, rmask)
                if (cur_h, ext) > (best_h, best_len):
                    best_h, best_len = cur_h, ext
                return
            nb = adj[cur] & avail
            hn = nb & hmask
            if hn:
                picks = []
                while hn:
                    low = hn & -hn
                    picks.append(low.bit_length() - 1)
                    hn ^= low
                picks.sort(key=lambda j: -down[j])
                for j in picks:
                    dfs_value(j, cur_h + 1, cur_len + 1, avail & ~(1 << j), rmask)
            group = nb & ~hmask
            while group:
                low = group & -group
                dfs_value(
                    low.bit_length() - 1,
                    cur_h,
                    cur_len + 1,
                    avail & ~low,
                    rmask,
                )
                group ^= low

        guided: Optional[List[int]] = None
        try:
            dfs_value(0, root_h, 1, full & ~1, full)
        except _SliceExhausted:
            # Exact fallback for instances too dense for the incumbent
            # search: optimal value by subset DP (seeded with the incumbent
            # found so far), then a guided lowest-id realization vetted by
            # on-demand best completions (see the _segment_* helpers).
            ctx = _segment_ctx(n, adj, hmask, spend)
            best_h, best_len = _segment_value(ctx, spend, (best_h, best_len))
            guided = _segment_trail(ctx, (best_h, best_len), spend)

        trail: List[int] = []

        def dfs_path(cur: int, cur_h: int, cur_len: int, avail: int) -> bool:
            spend()
            if (cur_h, cur_len) == (best_h, best_len):
                return True
            if cur_len >= best_len:
                return False
            rmask = reach_from(cur, avail)
            ub_h, ub_len = bound(cur_h, cur_len, rmask)
            if ub_h < best_h or ub_len < best_len:
                return False
            if not rmask & hmask:
                # The H count is final; walk a longest easy completion,
                # lowest ids first, trimmed to the exact target length.
                need = best_len - cur_len
                if longest_easy(cur, rmask) < need:
                    return False
                node, mask = cur, rmask
                while need:
                    nb = adj[node] & mask
                    while nb:
                        low = nb & -nb
                        j = low.bit_length() - 1
                        if 1 + longest_easy(j, mask & ~low) >= need:
                            trail.append(j)
                            node, mask, need = j, mask & ~low, need - 1
                            break
                        nb ^= low
                    else:  # pragma: no cover - contradicts the check above
                        raise RuntimeError("easy completion vanished")
                return True
            nb = adj[cur] & avail
            while nb:
                low = nb & -nb
                trail.append(low.bit_length() - 1)
                if dfs_path(
                    low.bit_length() - 1,
                    cur_h + (1 if low & hmask else 0),
                    cur_len + 1,
                    avail & ~low,
                ):
                    return True
                trail.pop()
                nb ^= low
            return False

        if guided is not None:
            trail.extend(guided)
        elif not dfs_path(0, root_h, 1, full & ~1):
            raise RuntimeError("optimal segment value not realized by a path")
        self.last_search_expansions = exp
        path = [bridges[0], agent.id, *(ids[j] for j in trail)]
        self._apply_chain(path)
        return ChainPath(
            ids=tuple(path),
            h_count=best_h,
            e_count=best_len - best_h,
        )

    def _apply_chain(self, path: List[int]) -> None:
        """Retire the giving bridge, remove matched agents, promote the last."""
        start = path[0]
        self.remove(start)
        for mid in path[1:-1]:
            self.remove(mid)
        self.promote_to_bridge(path[-1])

    # -- invariant checks (debug runs) -----------------------------------

    def assert_no_waiting_two_cycle(self) -> None:
        ids = list(self.waiting_h) + list(self.waiting_e)
        for i in ids:
            out_i = self.out_edges[i]
            for j in ids:
                if j > i and j in out_i and i in self.out_edges[j]:
                    raise AssertionError(f"waiting agents {i}, {j} are mutually matched")

    def assert_no_bridge_to_waiting_edge(self) -> None:
        waiting = self.waiting_h.keys() | self.waiting_e.keys()
        for b in self.bridges:
            hit = self.out_edges[b] & waiting
            if hit:
                raise AssertionError(f"bridge {b} could give to waiting agents {hit}")


@dataclass(frozen=True)
class GraphSummary:
    """Results of one graph-engine replica.

    ``summary`` holds the count-based statistics (Little's-law waits, CIs).
    ``w_h_direct``/``w_e_direct`` average the matched agents' observed
    sojourns (departure epoch minus arrival epoch, scaled by the mean
    inter-arrival time); agents still waiting at the end are excluded, as
    are unmatched departures under the strict chain variant.
    """

    summary: SimSummary
    w_h_direct: float
    w_e_direct: float
    matched_h: int
    matched_e: int
    search_expansions_max: int = 0


def _graph_rngs(
    base_seed: int, replica: int
) -> Tuple[random.Random, np.random.Generator]:
    child = replica_sequences(base_seed, replica + 1)[replica]
    pick_ss, edges_ss = child.spawn(2)
    words = pick_ss.generate_state(4, dtype=np.uint32)
    rng = random.Random(int.from_bytes(words.tobytes(), "little"))
    return rng, np.random.Generator(np.random.PCG64(edges_ss))


_GRAPH_POLICIES = (
    PolicyKind.BILATERAL_H,
    PolicyKind.BILATERAL_E,
    PolicyKind.CHAIN,
    PolicyKind.CHAIN_HAT,
    PolicyKind.MAX_CHAINS,
)


def run_graph_replica(
    policy: PolicyKind,
    p: MarketParams,
    rc: RunControls,
    replica: int = 0,
    debug: bool = False,
    chain_budget: int = DEFAULT_CHAIN_BUDGET,
) -> GraphSummary:
    """Simulate one replica on the explicit compatibility graph.

    Chain policies start from ``p.d`` altruistic bridges.  Waiting times are
    reported two ways: from the mean waiting counts via Little's law (in
    ``summary``) and directly from matched agents' sojourns; on long runs
    the two agree within confidence intervals.
    """
    validate_params(p)
    validate_controls(rc)
    if policy not in _GRAPH_POLICIES:
        raise ParamError(f"{policy.value} is not a graph policy")
    rng, gen = _graph_rngs(rc.seed, replica)
    graph = CompatibilityGraph(debug=debug)
    is_chain = policy in (PolicyKind.CHAIN, PolicyKind.CHAIN_HAT, PolicyKind.MAX_CHAINS)
    if is_chain:
        for _ in range(p.d):
            graph.add_bridge_seed()
    total_rate = p.lambda_h + p.lambda_e
    a_h = p.lambda_h / total_rate
    warmup = int(rc.arrivals * rc.warmup_fraction)
    post = rc.arrivals - warmup
    m = post // 20
    if m < 1:
        raise ParamError(
            "arrivals too small: need at least 20 post-warmup epochs for batch means"
        )
    skip = rc.arrivals - 20 * m
    series_h = np.empty(20 * m)
    series_e = np.empty(20 * m)
    waits_h: List[int] = []
    waits_e: List[int] = []
    seg_count = 0
    seg_len_total = 0
    max_expansions = 0
    bilateral = policy in (PolicyKind.BILATERAL_H, PolicyKind.BILATERAL_E)

    def record_wait(aid: int, epoch: int) -> None:
        a = graph.agents[aid]
        if a.arrival_epoch < skip:
            return  # warmup arrivals don't enter the wait statistics
        (waits_h if a.agent_type == "H" else waits_e).append(epoch - a.arrival_epoch)

    for t in range(rc.arrivals):
        agent_type: Literal["H", "E"] = "H" if rng.random() < a_h else "E"
        agent = graph.arrive(agent_type, t, p, gen)
        if bilateral:
            partner = graph.match_bilateral(
                agent, "H" if policy == PolicyKind.BILATERAL_H else "E", rng
            )
            if partner is not None:
                record_wait(partner, t)
                record_wait(agent.id, t)
        else:
            if policy == PolicyKind.MAX_CHAINS:
                seg = graph.match_chain_max(agent, budget=chain_budget)
                max_expansions = max(max_expansions, graph.last_search_expansions)
            else:
                seg = graph.match_chain_local(agent, rng)
            if seg is None:
                if policy == PolicyKind.CHAIN_HAT and agent_type == "E":
                    graph.remove(agent.id)  # leaves unmatched, never waits
                else:
                    graph.join_waiting(agent)
            else:
                seg_count += 1
                seg_len_total += seg.length
                for aid in seg.ids[1:]:  # everyone after the bridge is matched
                    record_wait(aid, t)
        if t >= skip:
            h, e = graph.counts()
            series_h[t - skip] = h
            series_e[t - skip] = e
        if debug:
            if bilateral:
                graph.assert_no_waiting_two_cycle()
            else:
                graph.assert_no_bridge_to_waiting_edge()
    mean_h, ci_h = batch_mean_ci(series_h)
    mean_e, ci_e = batch_mean_ci(series_e)
    chain_mean = seg_len_total / seg_count if is_chain and seg_count else None
    summary = SimSummary(
        mean_h=mean_h,
        mean_e=mean_e,
        w_h=little_law(mean_h, p.lambda_h),
        w_e=little_law(mean_e, p.lambda_e) if p.lambda_e > 0 else 0.0,
        chain_len_mean_given_positive=chain_mean,
        ci_half_width_h=ci_h,
        ci_half_width_e=ci_e,
        samples=20 * m,
    )
    w_h_direct = (sum(waits_h) / len(waits_h) / total_rate) if waits_h else 0.0
    w_e_direct = (sum(waits_e) / len(waits_e) / total_rate) if waits_e else 0.0
    return GraphSummary(
        summary=summary,
        w_h_direct=w_h_direct,
        w_e_direct=w_e_direct,
        matched_h=len(waits_h),
        matched_e=len(waits_e),
        search_expansions_max=max_expansions,
    )
