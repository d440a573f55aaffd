"""Seeded, log-scaled fanout sampling of query (and query+target) subgraphs."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .hypergraph import MISSING, Query, SemanticHypergraph, ValidationError


@dataclass(frozen=True)
class FanoutSchedule:
    m: int
    per_hop: tuple[int, ...]

    @property
    def hops(self) -> int:
        return len(self.per_hop)


def _floor_log(m: int, base: int) -> int:
    p, acc = 0, base
    while acc <= m:
        p += 1
        acc *= base
    return p


def fanout_schedule(m: int, K: int) -> FanoutSchedule:
    """``m`` edges per node at hop 1, ``max(1, floor(log_k m))`` at hop ``k >= 2``."""
    if m < 1 or K < 1:
        raise ValidationError(f"fanout schedule needs m >= 1 and K >= 1 (got m={m}, K={K})")
    per_hop = [m] + [max(1, _floor_log(m, k)) for k in range(2, K + 1)]
    return FanoutSchedule(m, tuple(per_hop))


@dataclass
class Subgraph:
    """A sampled neighborhood around one source hyperedge.

    Local edge 0 is always the (incomplete) source edge; local edge ``i + 1``
    is graph edge ``edges[i]``.  ``memberships[j]`` lists the local edges
    node ``nodes[j]`` aggregates from in the E->V stage (already capped).
    """

    query: Query
    edges: np.ndarray
    nodes: np.ndarray
    hop_distance: np.ndarray
    memberships: list[np.ndarray] = field(repr=False)
    seed: int
    K: int
    target: int | None = None

    def distance_of(self, v: int) -> int:
        hit = np.flatnonzero(self.nodes == v)
        return int(self.hop_distance[hit[0]]) if len(hit) else self.K + 1

    def node_index(self) -> dict[int, int]:
        return {int(v): i for i, v in enumerate(self.nodes)}

    def same_as(self, other: "Subgraph") -> bool:
        return (
            self.query == other.query
            and self.seed == other.seed
            and self.target == other.target
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.nodes, other.nodes)
            and np.array_equal(self.hop_distance, other.hop_distance)
            and len(self.memberships) == len(other.memberships)
            and all(np.array_equal(a, b) for a, b in zip(self.memberships, other.memberships))
        )


def _check_query(graph: SemanticHypergraph, query: Query) -> list[int]:
    known = query.known_entities
    if not known:
        raise ValidationError("query has no known entity to expand from")
    for v in known:
        if not 0 <= v < graph.entity_count:
            raise ValidationError(f"query entity {v} out of range")
    for p in query.pairs:
        if not 0 <= p.role < graph.relation_count:
            raise ValidationError(f"query relation {p.role} out of range")
    return known


def _expand(graph, seeds, schedule, state, exclude):
    return kernels.expand(
        graph.ent_ptr, graph.ent_edges, graph.edge_ptr, graph.edge_members,
        np.asarray(seeds, dtype=np.int64), np.asarray(schedule.per_hop, dtype=np.int64),
        state, -1 if exclude is None else exclude,
    )


def _memberships(graph, query, edges, nodes, cap, state):
    local = {int(v): i for i, v in enumerate(nodes)}
    lists: list[list[int]] = [[] for _ in nodes]
    for v in query.known_entities:
        lists[local[v]].append(0)
    for i, e in enumerate(edges, start=1):
        for v in graph.edge_members[graph.edge_ptr[e]:graph.edge_ptr[e + 1]]:
            lists[local[int(v)]].append(i)
    out = []
    for lst in lists:
        if cap is not None and len(lst) > cap:
            # the source edge is never dropped: it carries the query
            keep_src = lst[0] == 0
            pool = lst[1:] if keep_src else lst
            idx, state = kernels.sample_indices(len(pool), cap - keep_src, state)
            lst = ([0] if keep_src else []) + sorted(pool[i] for i in idx)
        out.append(np.asarray(lst, dtype=np.int64))
    return out, state


def sample_query_subgraph(
    graph: SemanticHypergraph,
    query: Query,
    K: int,
    schedule: FanoutSchedule,
    rng_seed: int,
    e2v_cap: int | None = None,
) -> Subgraph:
    """Expand ``K`` hops from the query's known entities.

    The full fact behind the query (``query.source_edge``) is never sampled.
    ``e2v_cap`` defaults to ``2 * schedule.m``.
    """
    if schedule.hops != K:
        raise ValidationError(f"schedule has {schedule.hops} hops, K={K}")
    known = _check_query(graph, query)
    cap = 2 * schedule.m if e2v_cap is None else e2v_cap
    edges, nodes, dist, state = _expand(graph, known, schedule, rng_seed, query.source_edge)
    members, _ = _memberships(graph, query, edges, nodes, cap, state)
    return Subgraph(query, edges, nodes, dist, members, rng_seed, K)


def source_only_subgraph(graph: SemanticHypergraph, query: Query, K: int = 1) -> Subgraph:
    """The degenerate subgraph holding nothing but the source edge."""
    known = _check_query(graph, query)
    nodes = np.asarray(known, dtype=np.int64)
    return Subgraph(
        query, np.zeros(0, dtype=np.int64), nodes, np.zeros(len(nodes), dtype=np.int64),
        [np.zeros(1, dtype=np.int64) for _ in nodes], 0, K,
    )


def _bfs_distances(graph, query, edges, nodes, K):
    """Hop distance from the source edge inside the sampled subgraph, capped at K+1."""
    local = {int(v): i for i, v in enumerate(nodes)}
    adj: list[list[int]] = [[] for _ in nodes]
    members = []
    for i, e in enumerate(edges):
        mem = [local[int(v)] for v in graph.edge_members[graph.edge_ptr[e]:graph.edge_ptr[e + 1]]]
        members.append(mem)
        for v in mem:
            adj[v].append(i)
    dist = np.full(len(nodes), K + 1, dtype=np.int64)
    queue = deque()
    for v in query.known_entities:
        dist[local[v]] = 0
        queue.append(local[v])
    seen_edge = np.zeros(len(edges), dtype=bool)
    while queue:
        u = queue.popleft()
        if dist[u] >= K + 1:
            continue
        for i in adj[u]:
            if seen_edge[i]:
                continue
            seen_edge[i] = True
            for w in members[i]:
                if dist[w] > dist[u] + 1:
                    dist[w] = dist[u] + 1
                    queue.append(w)
    return np.minimum(dist, K + 1)


def sample_pair_subgraph(
    graph: SemanticHypergraph,
    query: Query,
    target: int,
    K: int,
    schedule: FanoutSchedule,
    rng_seed: int,
    e2v_cap: int | None = None,
) -> Subgraph:
    """Merge the query subgraph with the target's own K-hop sample.

    Hop distances are measured from the source edge inside the merged
    subgraph, so they never exceed the query-only distances.
    """
    if not 0 <= target < graph.entity_count:
        raise ValidationError(f"target entity {target} out of range")
    if schedule.hops != K:
        raise ValidationError(f"schedule has {schedule.hops} hops, K={K}")
    known = _check_query(graph, query)
    cap = 2 * schedule.m if e2v_cap is None else e2v_cap
    q_edges, q_nodes, _, state = _expand(graph, known, schedule, rng_seed, query.source_edge)
    t_edges, t_nodes, _, state = _expand(graph, [target], schedule, state, query.source_edge)

    seen = set(q_edges.tolist())
    edges = q_edges.tolist() + [e for e in t_edges.tolist() if e not in seen]
    node_seen = set(q_nodes.tolist())
    nodes = q_nodes.tolist() + [v for v in t_nodes.tolist() if v not in node_seen]
    edges = np.asarray(edges, dtype=np.int64)
    nodes = np.asarray(nodes, dtype=np.int64)
    dist = _bfs_distances(graph, query, edges, nodes, K)
    members, _ = _memberships(graph, query, edges, nodes, cap, state)
    return Subgraph(query, edges, nodes, dist, members, rng_seed, K, target=int(target))


def exact_union(graph: SemanticHypergraph, query: Query, K: int, target: int | None = None) -> set[int]:
    """Exact K-hop edge union around the query (and target), never passing through the source fact."""
    skip = query.source_edge
    seeds = list(query.known_entities) + ([target] if target is not None else [])
    out: set[int] = set()
    for v in seeds:
        current = {e for e in graph.edges_of(v) if e != skip}
        reached = set(current)
        for _ in range(K - 1):
            nodes = {u for e in current for u in graph.members_of(e)}
            current = {e for u in nodes for e in graph.edges_of(u) if e != skip}
            reached |= current
        out |= reached
    return out


__all__ = [
    "FanoutSchedule", "Subgraph", "fanout_schedule", "sample_query_subgraph",
    "sample_pair_subgraph", "source_only_subgraph", "exact_union", "MISSING",
]
