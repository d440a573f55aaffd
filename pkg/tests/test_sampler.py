import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nshart import _pykernels, kernels
from nshart.hypergraph import Hyperedge, Query, ValidationError, build_hypergraph
from nshart.sampler import (
    FanoutSchedule, exact_union, fanout_schedule, sample_pair_subgraph, sample_query_subgraph,
    source_only_subgraph,
)

from conftest import random_graph

try:
    from nshart import _ckernels
except ImportError:  # pragma: no cover - compiled extension not built
    _ckernels = None


def int_log_floor(m, k):
    """Largest p with k**p <= m (integer-only oracle)."""
    p = 0
    while k ** (p + 1) <= m:
        p += 1
    return p


def oracle_union(g, query, K, target=None):
    """Union of the graph's own K-hop neighborhoods; valid when the query has no source edge."""
    seeds = list(query.known_entities) + ([target] if target is not None else [])
    out = set()
    for v in seeds:
        out |= g.k_hop_neighborhood(v, K)
    return out


def random_query(g, rng, with_source=False):
    e = int(rng.integers(g.edge_count))
    fact = g.edges[e]
    return Query.from_fact(fact, int(rng.integers(fact.arity)), source_edge=e if with_source else None)


# -- fanout schedule -------------------------------------------------------------


def test_fanout_schedule_defaults():
    assert list(fanout_schedule(16, 2).per_hop) == [16, 4]
    assert list(fanout_schedule(16, 3).per_hop) == [16, 4, 2]
    assert list(fanout_schedule(1, 3).per_hop) == [1, 1, 1]


@given(st.integers(1, 5000), st.integers(1, 6))
def test_fanout_schedule_floor_clamp(m, K):
    sched = fanout_schedule(m, K)
    assert sched.per_hop[0] == m and sched.hops == K
    for k in range(2, K + 1):
        assert sched.per_hop[k - 1] == max(1, int_log_floor(m, k))
        assert sched.per_hop[k - 1] >= 1


def test_fanout_schedule_rejects():
    with pytest.raises(ValidationError):
        fanout_schedule(0, 2)
    with pytest.raises(ValidationError):
        fanout_schedule(4, 0)


# -- soundness / completeness ----------------------------------------------------


def test_subset_of_exact_union_on_100_graphs():
    for gseed in range(100):
        g = random_graph(gseed, n_ent=40, n_edges=60)
        rng = np.random.default_rng(gseed)
        for trial in range(5):
            K = int(rng.integers(1, 4))
            m = int(rng.integers(1, 6))
            q = random_query(g, rng)
            sub = sample_query_subgraph(g, q, K, fanout_schedule(m, K), trial)
            assert set(sub.edges.tolist()) <= oracle_union(g, q, K)
            assert len(set(sub.edges.tolist())) == len(sub.edges)


def test_equal_to_exact_union_at_saturation():
    for gseed in range(100):
        g = random_graph(gseed, n_ent=40, n_edges=60)
        rng = np.random.default_rng(gseed + 1000)
        big = max(g.degree(v) for v in range(g.entity_count))
        for trial in range(3):
            K = int(rng.integers(1, 4))
            sched = FanoutSchedule(big, (big,) * K)
            q = random_query(g, rng)
            sub = sample_query_subgraph(g, q, K, sched, trial)
            assert set(sub.edges.tolist()) == oracle_union(g, q, K)


def test_exact_union_matches_neighborhoods_without_source():
    for gseed in range(30):
        g = random_graph(gseed)
        rng = np.random.default_rng(gseed)
        q = random_query(g, rng)
        for K in (1, 2, 3):
            assert exact_union(g, q, K) == oracle_union(g, q, K)


def test_source_edge_is_never_sampled():
    for gseed in range(50):
        g = random_graph(gseed)
        rng = np.random.default_rng(gseed)
        q = random_query(g, rng, with_source=True)
        big = 10**6
        sub = sample_query_subgraph(g, q, 2, FanoutSchedule(big, (big, big)), 0)
        assert q.source_edge not in set(sub.edges.tolist())
        assert set(sub.edges.tolist()) == exact_union(g, q, 2)


# -- subgraph structure ----------------------------------------------------------


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 3), st.integers(1, 8), st.integers(0, 2**63 - 1))
def test_subgraph_invariants(gseed, K, m, seed):
    g = random_graph(gseed % 500)
    rng = np.random.default_rng(gseed)
    q = random_query(g, rng, with_source=bool(gseed % 2))
    sub = sample_query_subgraph(g, q, K, fanout_schedule(m, K), seed)
    node_set = set(sub.nodes.tolist())
    assert len(node_set) == len(sub.nodes)
    covered = set(q.known_entities)
    for e in sub.edges:
        covered |= set(g.members_of(int(e)))
    assert node_set == covered
    assert np.all(sub.hop_distance <= K + 1)
    for v in q.known_entities:
        assert sub.distance_of(v) == 0
    cap = 2 * m
    for v, mem in zip(sub.nodes, sub.memberships):
        assert 1 <= len(mem) <= cap
        if v in q.known_entities:
            assert mem[0] == 0  # the source edge survives the cap
        for local_e in mem[mem > 0]:
            assert int(v) in g.members_of(int(sub.edges[local_e - 1]))


def test_per_node_budget_on_star():
    # hub 0 with 50 edges; every hop-1 edge is drawn from the hub
    facts = [Hyperedge.of([(0, 0), (1, i)]) for i in range(1, 51)]
    g = build_hypergraph(facts, 51, 2)
    q = Query.from_fact(Hyperedge.of([(0, 0), (1, 1)]), 1)
    for seed in range(20):
        sub = sample_query_subgraph(g, q, 1, fanout_schedule(5, 1), seed)
        assert len(sub.edges) == 5


def test_budget_bound():
    for gseed in range(40):
        g = random_graph(gseed, n_ent=50, n_edges=120)
        rng = np.random.default_rng(gseed)
        q = random_query(g, rng)
        sched = fanout_schedule(3, 3)
        sub = sample_query_subgraph(g, q, 3, sched, gseed)
        bound = sum(int(np.sum(sub.hop_distance == k - 1)) * f for k, f in enumerate(sched.per_hop, start=1))
        assert len(sub.edges) <= bound


def test_seed_determinism():
    g = random_graph(11, n_edges=80)
    q = random_query(g, np.random.default_rng(0))
    a = sample_query_subgraph(g, q, 2, fanout_schedule(3, 2), 99)
    b = sample_query_subgraph(g, q, 2, fanout_schedule(3, 2), 99)
    assert a.same_as(b)
    outs = {tuple(sample_query_subgraph(g, q, 2, fanout_schedule(2, 2), s).edges.tolist()) for s in range(30)}
    assert len(outs) > 1


def test_pair_subgraph():
    for gseed in range(50):
        g = random_graph(gseed)
        rng = np.random.default_rng(gseed)
        q = random_query(g, rng)
        target = int(rng.integers(g.entity_count))
        K = 2
        sub = sample_pair_subgraph(g, q, target, K, fanout_schedule(4, K), gseed)
        assert target in set(sub.nodes.tolist()) and sub.target == target
        assert set(sub.edges.tolist()) <= oracle_union(g, q, K, target)
        q_only = sample_query_subgraph(g, q, K, fanout_schedule(4, K), gseed)
        assert set(q_only.edges.tolist()) <= set(sub.edges.tolist())
        for v, d in zip(q_only.nodes, q_only.hop_distance):
            assert sub.distance_of(int(v)) <= d
        assert np.all(sub.hop_distance <= K + 1)
        for v in q.known_entities:
            assert sub.distance_of(v) == 0


def test_pair_distance_is_bfs_from_source():
    # chain: known 0 -e0- 1 -e1- 2 -e2- 3; target 3 reaches 2 via its own sample
    facts = [Hyperedge.of([(0, 0), (1, 1)]), Hyperedge.of([(0, 1), (1, 2)]), Hyperedge.of([(0, 2), (1, 3)])]
    g = build_hypergraph(facts, 5, 2)
    q = Query.from_fact(Hyperedge.of([(0, 0), (1, 4)]), 1)
    sub = sample_pair_subgraph(g, q, 3, 2, fanout_schedule(4, 2), 0)
    assert {int(v): int(d) for v, d in zip(sub.nodes, sub.hop_distance)} == {0: 0, 1: 1, 2: 2, 3: 3}


def test_source_only_subgraph():
    g = random_graph(2)
    q = random_query(g, np.random.default_rng(2))
    sub = source_only_subgraph(g, q, 2)
    assert len(sub.edges) == 0
    assert sorted(sub.nodes.tolist()) == sorted(q.known_entities)
    assert all(m.tolist() == [0] for m in sub.memberships)


def test_sampler_rejects_bad_input():
    g = random_graph(1)
    q = random_query(g, np.random.default_rng(1))
    with pytest.raises(ValidationError):
        sample_query_subgraph(g, q, 3, fanout_schedule(4, 2), 0)
    with pytest.raises(ValidationError):
        sample_pair_subgraph(g, q, g.entity_count, 2, fanout_schedule(4, 2), 0)


# -- compiled vs pure-Python kernels ---------------------------------------------


@pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")
def test_cython_matches_python():
    for gseed in range(100):
        g = random_graph(gseed, n_ent=40, n_edges=80)
        rng = np.random.default_rng(gseed)
        for trial in range(3):
            q = random_query(g, rng, with_source=bool(trial % 2))
            seeds = np.asarray(q.known_entities, dtype=np.int64)
            fan = np.asarray(fanout_schedule(int(rng.integers(1, 6)), 3).per_hop, dtype=np.int64)
            state = int(rng.integers(0, 2**63))
            excl = -1 if q.source_edge is None else q.source_edge
            args = (g.ent_ptr, g.ent_edges, g.edge_ptr, g.edge_members, seeds, fan, state, excl)
            a, b = _pykernels.expand(*args), _ckernels.expand(*args)
            for x, y in zip(a[:3], b[:3]):
                assert np.array_equal(x, y)
            assert int(a[3]) == int(b[3])
        for n, k in [(0, 3), (5, 5), (10, 3), (100, 17)]:
            st_ = int(rng.integers(0, 2**63))
            ia, sa = _pykernels.sample_indices(n, k, st_)
            ib, sb = _ckernels.sample_indices(n, k, st_)
            assert np.array_equal(ia, ib) and int(sa) == int(sb)


def test_sample_indices_distinct():
    for seed in range(200):
        idx, _ = _pykernels.sample_indices(20, 7, seed)
        assert len(set(idx.tolist())) == 7 and all(0 <= i < 20 for i in idx)


def test_splitmix64_reference_values():
    # first outputs of splitmix64 seeded with 0 (published reference stream)
    s, z1 = _pykernels.splitmix64(0)
    _, z2 = _pykernels.splitmix64(s)
    assert z1 == 0xE220A8397B1DCDAF
    assert z2 == 0x6E789E6AA1B965F4


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")
