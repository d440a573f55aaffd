"""N-ary semantic hypergraph: role-valued incidence and exact neighborhoods.

Entities, relations and hyperedges all use dense integer ids.  The logical
incidence matrix ``H(v, e)`` (a role id, or absent) is never materialized;
it is represented by per-entity membership lists plus a CSR copy that the
sampling kernels read directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_MAX_ARITY = 7


class ValidationError(ValueError):
    """Raised when facts, queries or ids violate the graph contract."""


@dataclass(frozen=True)
class RolePair:
    role: int
    entity: int


@dataclass(frozen=True)
class Hyperedge:
    """One n-ary fact.  Pair order is storage order only."""

    pairs: tuple[RolePair, ...]
    primary: tuple[bool, ...] = ()
    id: int = -1

    def __post_init__(self):
        if not self.primary:
            object.__setattr__(self, "primary", tuple(True for _ in self.pairs))
        if len(self.primary) != len(self.pairs):
            raise ValidationError("primary flags must match pair count")

    @classmethod
    def of(cls, pairs: Iterable[Sequence[int]], primary: Sequence[bool] = (), id: int = -1):
        return cls(tuple(RolePair(int(r), int(v)) for r, v in pairs), tuple(primary), id)

    @property
    def arity(self) -> int:
        return len(self.pairs)

    @property
    def members(self) -> frozenset[int]:
        return frozenset(p.entity for p in self.pairs)

    def key(self) -> tuple[tuple[int, int], ...]:
        """Order-free identity of the fact (sorted role/entity pairs)."""
        return tuple(sorted((p.role, p.entity) for p in self.pairs))


MISSING = -1


@dataclass(frozen=True)
class Query:
    """An incomplete fact with exactly one missing slot.

    ``pairs`` keeps the full role list; the entity at ``missing_index`` is
    replaced by ``MISSING``.  ``answer`` is the held-out entity when known.
    """

    pairs: tuple[RolePair, ...]
    missing_index: int
    answer: int | None = None
    primary: tuple[bool, ...] = ()
    source_edge: int | None = None  # id of the full fact when it lives in the graph

    def __post_init__(self):
        missing = [i for i, p in enumerate(self.pairs) if p.entity == MISSING]
        if missing != [self.missing_index]:
            raise ValidationError("query must have exactly one missing slot at missing_index")
        if not self.primary:
            object.__setattr__(self, "primary", tuple(True for _ in self.pairs))

    @classmethod
    def from_fact(cls, fact: Hyperedge, index: int, source_edge: int | None = None) -> "Query":
        pairs = list(fact.pairs)
        answer = pairs[index].entity
        pairs[index] = RolePair(pairs[index].role, MISSING)
        return cls(tuple(pairs), index, answer, fact.primary, source_edge)

    @property
    def missing_role(self) -> int:
        return self.pairs[self.missing_index].role

    @property
    def known_entities(self) -> list[int]:
        seen: dict[int, None] = {}
        for p in self.pairs:
            if p.entity != MISSING:
                seen.setdefault(p.entity)
        return list(seen)

    @property
    def slot_kind(self) -> str:
        return "primary" if self.primary[self.missing_index] else "qualifier"

    def pattern_key(self):
        """Filter key: missing role plus every known (role, entity) pair."""
        known = tuple(sorted((p.role, p.entity) for i, p in enumerate(self.pairs) if i != self.missing_index))
        return (self.missing_role, known)


@dataclass
class SemanticHypergraph:
    entity_count: int
    relation_count: int
    edges: list[Hyperedge]
    incidence: list[list[tuple[int, int]]] = field(repr=False)
    max_arity: int = DEFAULT_MAX_ARITY
    multi_role: bool = True

    # CSR views used by the sampling kernels
    ent_ptr: np.ndarray = field(default=None, repr=False)
    ent_edges: np.ndarray = field(default=None, repr=False)
    edge_ptr: np.ndarray = field(default=None, repr=False)
    edge_members: np.ndarray = field(default=None, repr=False)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def _check_entity(self, v: int):
        if not 0 <= v < self.entity_count:
            raise ValidationError(f"entity id {v} out of range [0, {self.entity_count})")

    def _check_edge(self, e: int):
        if not 0 <= e < len(self.edges):
            raise ValidationError(f"edge id {e} out of range [0, {len(self.edges)})")

    def incidence_value(self, v: int, e: int):
        """Role id of ``v`` in ``e``, ``None`` when absent.

        With several roles for ``v`` in ``e`` the frozenset of role ids is
        returned instead.
        """
        self._check_entity(v)
        self._check_edge(e)
        roles = [p.role for p in self.edges[e].pairs if p.entity == v]
        if not roles:
            return None
        if len(roles) == 1:
            return roles[0]
        return frozenset(roles)

    def intra_edge_neighbors(self, v: int, e: int) -> set[int]:
        self._check_entity(v)
        self._check_edge(e)
        members = self.edges[e].members
        if v not in members:
            raise ValidationError(f"entity {v} is not a member of edge {e}")
        return set(members - {v})

    def edges_of(self, v: int) -> list[int]:
        """Distinct edges containing ``v`` (1-hop neighborhood), in id order."""
        self._check_entity(v)
        return self.ent_edges[self.ent_ptr[v]:self.ent_ptr[v + 1]].tolist()

    def members_of(self, e: int) -> list[int]:
        self._check_edge(e)
        return self.edge_members[self.edge_ptr[e]:self.edge_ptr[e + 1]].tolist()

    def k_hop_neighborhood(self, v: int, k: int) -> set[int]:
        """Exact, unsampled H_k(v) via the union recurrence."""
        if k < 1:
            raise ValidationError("hop count must be >= 1")
        self._check_entity(v)
        current = set(self.edges_of(v))
        for _ in range(k - 1):
            nodes = {u for e in current for u in self.members_of(e)}
            current = {e for u in nodes for e in self.edges_of(u)}
        return current

    def degree(self, v: int) -> int:
        return int(self.ent_ptr[v + 1] - self.ent_ptr[v])

    def entities_in_use(self) -> np.ndarray:
        """Ids of entities that belong to at least one edge."""
        return np.flatnonzero(np.diff(self.ent_ptr) > 0)

    def star_expansion(self) -> np.ndarray:
        """Bipartite entity/edge links, one ``(entity, edge, role)`` row per pair."""
        rows = [(p.entity, e.id, p.role) for e in self.edges for p in e.pairs]
        return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


def build_hypergraph(
    facts: Sequence[Hyperedge],
    entity_count: int,
    relation_count: int,
    max_arity: int = DEFAULT_MAX_ARITY,
    multi_role: bool = True,
) -> SemanticHypergraph:
    edges: list[Hyperedge] = []
    incidence: list[list[tuple[int, int]]] = [[] for _ in range(entity_count)]
    for i, fact in enumerate(facts):
        if fact.arity < 2:
            raise ValidationError(f"fact {i}: arity {fact.arity} < 2")
        if fact.arity > max_arity:
            raise ValidationError(f"fact {i}: arity {fact.arity} exceeds max arity {max_arity}")
        for p in fact.pairs:
            if not 0 <= p.role < relation_count:
                raise ValidationError(f"fact {i}: relation id {p.role} out of range [0, {relation_count})")
            if not 0 <= p.entity < entity_count:
                raise ValidationError(f"fact {i}: entity id {p.entity} out of range [0, {entity_count})")
        if not multi_role and len(set(fact.pairs)) != fact.arity:
            raise ValidationError(f"fact {i}: repeated (role, entity) pair without multi-role support")
        edge = Hyperedge(fact.pairs, fact.primary, i)
        edges.append(edge)
        for p in edge.pairs:
            incidence[p.entity].append((i, p.role))

    graph = SemanticHypergraph(entity_count, relation_count, edges, incidence, max_arity, multi_role)
    _build_csr(graph)
    return graph


def _build_csr(graph: SemanticHypergraph):
    ent_lists = [sorted({e for e, _ in inc}) for inc in graph.incidence]
    graph.ent_ptr = np.zeros(graph.entity_count + 1, dtype=np.int64)
    graph.ent_ptr[1:] = np.cumsum([len(x) for x in ent_lists])
    graph.ent_edges = np.fromiter((e for x in ent_lists for e in x), dtype=np.int64, count=int(graph.ent_ptr[-1]))

    mem_lists = [sorted(e.members) for e in graph.edges]
    graph.edge_ptr = np.zeros(len(graph.edges) + 1, dtype=np.int64)
    graph.edge_ptr[1:] = np.cumsum([len(x) for x in mem_lists])
    graph.edge_members = np.fromiter((v for x in mem_lists for v in x), dtype=np.int64, count=int(graph.edge_ptr[-1]))


def binary_split(graph: SemanticHypergraph) -> SemanticHypergraph:
    """Replace every n-ary edge by binary edges (the high-order ablation).

    Primary pairs stay together as one binary edge; every qualifier pair is
    attached to the first primary pair.  Edges with no primary flags fall
    back to a star around their first pair.
    """
    facts = []
    for e in graph.edges:
        prim = [p for p, f in zip(e.pairs, e.primary) if f]
        qual = [p for p, f in zip(e.pairs, e.primary) if not f]
        if len(prim) < 1:
            prim, qual = [e.pairs[0]], list(e.pairs[1:])
        if len(prim) > 2:
            qual = prim[2:] + qual
            prim = prim[:2]
        if len(prim) == 2:
            facts.append(Hyperedge(tuple(prim), (True, True)))
        for q in qual:
            facts.append(Hyperedge((prim[0], q), (True, False)))
    return build_hypergraph(facts, graph.entity_count, graph.relation_count, graph.max_arity, graph.multi_role)
