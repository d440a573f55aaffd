"""NS-HART two-stage message passing over sampled semantic subgraphs.

Every iteration runs V->E (a Transformer over [CLS] + role/entity tokens of
each hyperedge, read out at [CLS]) and then E->V (a Transformer over [CLS] +
the embeddings of a node's member edges).  ``Sum``, ``Attention`` and
``SetAttention`` swap the Transformer for simpler multiset functions.

Positional table layout for max arity ``A``: entity marks ``1..n``, role
marks ``n+1..2n``, ``2A+1`` for [CLS], ``2A+2`` for the missing slot's role.
Qualifier-aware marks shift qualifier pairs by ``2A+3``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np
import torch

from . import diff
from .diff import DTYPE, ConfigError, ShapeError
from .hypergraph import MISSING, Hyperedge, Query, SemanticHypergraph, ValidationError
from .sampler import Subgraph


class PositionScheme(str, Enum):
    RANDOM = "random"
    SIMPLE = "simple"
    SAME = "same"


class MultisetKind(str, Enum):
    TRANSFORMER = "transformer"
    SUM = "sum"
    ATTENTION = "attention"
    SET_ATTENTION = "setattention"


class UnsupportedOperation(RuntimeError):
    pass


def cls_position(max_arity: int) -> int:
    return 2 * max_arity + 1


def missing_position(max_arity: int) -> int:
    return 2 * max_arity + 2


def position_table_size(max_arity: int, main_qualifier: bool = False) -> int:
    base = 2 * max_arity + 3
    return 2 * base if main_qualifier else base


@dataclass
class ModelConfig:
    relation_count: int
    d: int = 200
    layers: int = 2
    heads: int = 4
    hidden: int = 512
    K: int = 2
    dropout: float = 0.1
    multiset: MultisetKind = MultisetKind.TRANSFORMER
    positions: PositionScheme = PositionScheme.RANDOM
    main_qualifier: bool = False
    max_arity: int = 7
    task: str = "TR-NEF"
    feature_dim: int = 0
    intra_edge: bool = False

    def __post_init__(self):
        self.multiset = MultisetKind(self.multiset)
        self.positions = PositionScheme(self.positions)
        if self.d % self.heads:
            raise ConfigError(f"embedding dim {self.d} not divisible by {self.heads} heads")
        if self.task == "TR-EF" and self.feature_dim <= 0:
            raise ConfigError("TR-EF needs feature_dim > 0")

    def to_json(self) -> dict:
        out = asdict(self)
        out["multiset"] = self.multiset.value
        out["positions"] = self.positions.value
        return out


# -- positions ---------------------------------------------------------------


def edge_positions(valid, missing, primary, scheme, rng: np.random.Generator, max_arity: int,
                   main_qualifier: bool = False):
    """Vectorized positional marks for a padded batch of edges.

    ``valid``/``missing``/``primary`` are [E, A] boolean arrays.  Returns
    ``(entity_pos, role_pos)`` integer arrays; padded slots hold 0.
    """
    scheme = PositionScheme(scheme)
    E, A = valid.shape
    if A > max_arity:
        raise ConfigError(f"arity {A} exceeds max arity {max_arity}")
    if scheme is PositionScheme.RANDOM:
        keys = rng.random((E, A))
        keys[~valid] = np.inf
        ranks = np.argsort(np.argsort(keys, axis=1, kind="stable"), axis=1, kind="stable") + 1
        n = valid.sum(axis=1, keepdims=True)
        ent = np.where(valid, ranks, 0)
        role = np.where(valid, ranks + n, 0)
        role = np.where(missing, missing_position(max_arity), role)
        if main_qualifier:
            shift = np.where(valid & ~primary, 2 * max_arity + 3, 0)
            ent = ent + shift
            role = role + shift
    elif scheme is PositionScheme.SIMPLE:
        ent = np.zeros((E, A), dtype=np.int64)
        role = np.where(valid, 1, 0)
    else:
        ent = np.zeros((E, A), dtype=np.int64)
        role = np.zeros((E, A), dtype=np.int64)
    return ent.astype(np.int64), role.astype(np.int64)


def assign_positions(edge: Hyperedge | Query, scheme, rng: np.random.Generator,
                     max_arity: int = 7, main_qualifier: bool = False) -> dict:
    """Positional marks for one edge or query.

    Returns ``{"entity": [...], "role": [...], "cls": int}`` aligned with the
    edge's pair order.
    """
    pairs = edge.pairs
    if len(pairs) > max_arity:
        raise ConfigError(f"arity {len(pairs)} exceeds max arity {max_arity}")
    valid = np.ones((1, len(pairs)), dtype=bool)
    missing = np.array([[p.entity == MISSING for p in pairs]])
    primary = np.array([list(edge.primary)], dtype=bool)
    ent, role = edge_positions(valid, missing, primary, scheme, rng, max_arity, main_qualifier)
    cls = 0 if PositionScheme(scheme) is PositionScheme.SAME else cls_position(max_arity)
    return {"entity": ent[0].tolist(), "role": role[0].tolist(), "cls": cls}


# -- batch assembly ----------------------------------------------------------


def _graph_pair_arrays(graph: SemanticHypergraph):
    cached = getattr(graph, "_pair_arrays", None)
    if cached is not None:
        return cached
    E, A = graph.edge_count, max([e.arity for e in graph.edges], default=2)
    roles = np.zeros((E, A), dtype=np.int64)
    ents = np.full((E, A), -2, dtype=np.int64)
    prim = np.zeros((E, A), dtype=bool)
    for e in graph.edges:
        n = e.arity
        roles[e.id, :n] = [p.role for p in e.pairs]
        ents[e.id, :n] = [p.entity for p in e.pairs]
        prim[e.id, :n] = e.primary
    graph._pair_arrays = (roles, ents, prim)
    return graph._pair_arrays


@dataclass
class SubgraphBatch:
    """Disjoint union of subgraphs, flattened into padded index arrays.

    Edge slots: ``ents`` holds local node indexes, ``-1`` for the masked
    missing slot, ``-2`` for padding.  ``members`` pads with ``-1``.
    """

    roles: np.ndarray
    ents: np.ndarray
    valid: np.ndarray
    missing: np.ndarray
    primary: np.ndarray
    edge_ids: np.ndarray      # graph edge id, -1 for source edges
    edge_sub: np.ndarray
    src_edge: np.ndarray      # local index of each subgraph's source edge
    node_entity: np.ndarray
    node_dist: np.ndarray
    node_sub: np.ndarray
    node_offset: np.ndarray
    members: np.ndarray
    subgraphs: list

    @property
    def size(self) -> int:
        return len(self.src_edge)

    @classmethod
    def build(cls, graph: SemanticHypergraph, subgraphs: list[Subgraph]) -> "SubgraphBatch":
        g_roles, g_ents, g_prim = _graph_pair_arrays(graph)
        A = max(g_roles.shape[1], max(len(s.query.pairs) for s in subgraphs))
        roles_l, ents_l, prim_l, eid_l, esub_l, src = [], [], [], [], [], []
        nent_l, ndist_l, nsub_l, mem_l = [], [], [], []
        node_offset = np.zeros(len(subgraphs) + 1, dtype=np.int64)
        e_off = 0
        n_off = 0
        for b, s in enumerate(subgraphs):
            q = s.query
            order = np.argsort(s.nodes, kind="stable")
            sorted_nodes = s.nodes[order]

            def local(ids):
                pos = np.searchsorted(sorted_nodes, ids)
                return order[np.minimum(pos, len(order) - 1)]

            n_q = len(q.pairs)
            r = np.zeros((1 + len(s.edges), A), dtype=np.int64)
            en = np.full((1 + len(s.edges), A), -2, dtype=np.int64)
            pr = np.zeros((1 + len(s.edges), A), dtype=bool)
            r[0, :n_q] = [p.role for p in q.pairs]
            qe = np.array([p.entity for p in q.pairs], dtype=np.int64)
            en[0, :n_q] = np.where(qe == MISSING, -1, local(np.maximum(qe, 0)) + n_off)
            pr[0, :n_q] = q.primary
            if len(s.edges):
                w = g_roles.shape[1]
                r[1:, :w] = g_roles[s.edges]
                ge = g_ents[s.edges]
                en[1:, :w] = np.where(ge >= 0, local(np.maximum(ge, 0)) + n_off, -2)
                pr[1:, :w] = g_prim[s.edges]
            roles_l.append(r)
            ents_l.append(en)
            prim_l.append(pr)
            eid_l.append(np.concatenate([[-1], s.edges]))
            esub_l.append(np.full(1 + len(s.edges), b))
            src.append(e_off)
            nent_l.append(s.nodes)
            ndist_l.append(s.hop_distance)
            nsub_l.append(np.full(len(s.nodes), b))
            mem_l.extend(m + e_off for m in s.memberships)
            e_off += 1 + len(s.edges)
            n_off += len(s.nodes)
            node_offset[b + 1] = n_off

        ents = np.concatenate(ents_l)
        M = max((len(m) for m in mem_l), default=1)
        members = np.full((len(mem_l), max(M, 1)), -1, dtype=np.int64)
        for i, m in enumerate(mem_l):
            members[i, :len(m)] = m
        return cls(
            roles=np.concatenate(roles_l), ents=ents, valid=ents != -2, missing=ents == -1,
            primary=np.concatenate(prim_l), edge_ids=np.concatenate(eid_l),
            edge_sub=np.concatenate(esub_l), src_edge=np.asarray(src, dtype=np.int64),
            node_entity=np.concatenate(nent_l), node_dist=np.concatenate(ndist_l),
            node_sub=np.concatenate(nsub_l), node_offset=node_offset, members=members,
            subgraphs=list(subgraphs),
        )


# -- trace -------------------------------------------------------------------


@dataclass
class TraceRecord:
    hop: int
    stage: str
    owner: str
    tokens: list[tuple[str, float]]

    def to_json(self) -> dict:
        return {"hop": self.hop, "stage": self.stage, "owner": self.owner,
                "tokens": [{"label": lab, "weight": w} for lab, w in self.tokens]}


# -- the model ---------------------------------------------------------------


class NSHART:
    """Parameters plus the forward computation for every multiset kind."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params = diff.ParamStore()
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng):
        c = self.config
        P = self.params
        d = c.d
        P.add("relation_emb", diff.glorot_init((c.relation_count, d), rng))
        P.add("mask_entity", diff.glorot_init((1, d), rng))
        if c.task == "TR-EF":
            P.add("feature_proj", diff.glorot_init((c.feature_dim, d), rng))
        if c.task == "PSR":
            P.add("distance_emb", diff.glorot_init((c.K + 2, d), rng))
        kind = c.multiset
        for stage in ("ve", "ev"):
            if kind is MultisetKind.TRANSFORMER:
                P.add(f"{stage}.cls", diff.glorot_init((1, d), rng))
                for layer in range(c.layers):
                    P.update(diff.encoder_layer_params(f"{stage}.layer{layer}", d, c.hidden, rng))
            elif kind is MultisetKind.SUM:
                P.add(f"{stage}.w", diff.glorot_init((d, d), rng))
                P.add(f"{stage}.b", torch.zeros(d, dtype=DTYPE))
            elif kind is MultisetKind.ATTENTION:
                P.add(f"{stage}.query", diff.glorot_init((1, d), rng))
                P.add(f"{stage}.wk", diff.glorot_init((d, d), rng))
                P.add(f"{stage}.wv", diff.glorot_init((d, d), rng))
            else:
                P.add(f"{stage}.seed", diff.glorot_init((1, d), rng))
                P.update(diff.encoder_layer_params(f"{stage}.pma", d, c.hidden, rng))
        if kind is MultisetKind.TRANSFORMER:
            P.add("pos_emb", diff.glorot_init((position_table_size(c.max_arity, c.main_qualifier), d), rng))

    # ---- aggregators

    def _pairs_to_tokens(self, x, roles, ents, ent_pos=None, role_pos=None):
        p = self.params
        mask_vec = p["mask_entity"][0]
        xe = x[np.maximum(ents, 0)]
        xe = torch.where(torch.from_numpy(ents == -1)[..., None], mask_vec, xe)
        xr = p["relation_emb"][roles]
        if ent_pos is not None:
            xe = xe + p["pos_emb"][ent_pos]
            xr = xr + p["pos_emb"][role_pos]
        return xr, xe

    def _encoder_stack(self, stage, tokens, mask, train, gen):
        c = self.config
        pd = self.params.as_dict()
        w = None
        for layer in range(c.layers):
            tokens, w = diff.transformer_encoder_layer(
                tokens, pd, f"{stage}.layer{layer}", c.heads,
                c.dropout, train, mask, gen, cls_only=layer == c.layers - 1,
            )
        return tokens[:, 0, :], w[:, :, 0, :].mean(dim=1)

    def _bucketed(self, stage, lengths, make_tokens, width, train, gen):
        """Run the encoder once per distinct sequence length, without padding.

        ``make_tokens(rows, n)`` returns the [len(rows), T, d] token block for
        rows whose length is ``n``; ``width(n)`` maps a length to slot indexes
        in the padded weight layout.  Rows of length 0 are left as zeros.
        """
        c = self.config
        R = len(lengths)
        pieces, order = [], []
        weights = torch.zeros(R, width(None), dtype=DTYPE)
        for n in np.unique(lengths):
            if n == 0:
                continue
            rows = np.flatnonzero(lengths == n)
            out, w = self._encoder_stack(stage, make_tokens(rows, int(n)), None, train, gen)
            pieces.append(out)
            order.append(rows)
            cols = torch.from_numpy(np.asarray(width(int(n)), dtype=np.int64))
            weights[torch.from_numpy(rows)[:, None], cols[None, :]] = w.detach()
        if not pieces:
            return torch.zeros(R, c.d, dtype=DTYPE), weights
        rows = np.concatenate(order)
        out = torch.cat(pieces)
        if len(rows) < R or not np.array_equal(rows, np.arange(R)):
            out = torch.zeros(R, c.d, dtype=DTYPE).index_copy(0, torch.from_numpy(rows), out)
        return out, weights

    def _pool(self, stage, items, mask, train, gen):
        """Non-Transformer multiset pooling over [B, T, d] items with mask [B, T]."""
        c = self.config
        p = self.params
        m = mask[..., None].to(DTYPE)
        if c.multiset is MultisetKind.SUM:
            return (items * m).sum(dim=1) @ p[f"{stage}.w"] + p[f"{stage}.b"], None
        if c.multiset is MultisetKind.ATTENTION:
            keys = items @ p[f"{stage}.wk"]
            logits = (keys @ p[f"{stage}.query"][0]) / np.sqrt(c.d)
            logits = logits.masked_fill(~mask, float("-inf"))
            alpha = diff.softmax(logits, axis=-1)
            return (alpha[..., None] * (items @ p[f"{stage}.wv"])).sum(dim=1), alpha
        seed = p[f"{stage}.seed"].expand(items.shape[0], 1, c.d)
        prefix = f"{stage}.pma"
        pd = p.as_dict()
        a, w = diff.multi_head_attention(seed, items, pd, prefix, c.heads, mask, c.dropout, train, gen)
        h = diff.layer_norm(seed + a, pd[f"{prefix}.ln1_g"], pd[f"{prefix}.ln1_b"])
        f = diff.gelu(h @ pd[f"{prefix}.w1"] + pd[f"{prefix}.b1"]) @ pd[f"{prefix}.w2"] + pd[f"{prefix}.b2"]
        out = diff.layer_norm(h + diff.dropout(f, c.dropout, train, gen), pd[f"{prefix}.ln2_g"], pd[f"{prefix}.ln2_b"])
        return out[:, 0, :], w[:, :, 0, :].mean(dim=1)

    def aggregate_v_to_e(self, x, roles, ents, valid, ent_pos=None, role_pos=None,
                         train=False, gen=None):
        """Edge embeddings from member tokens.

        ``x``: [N, d] node embeddings; ``roles``/``ents``/``valid``: [E, A]
        with each row's pairs packed to the left.  Returns ``(h [E, d],
        weights)`` where weights are the head-averaged [CLS]-row attention
        laid out as ``[CLS, roles..., entities...]`` (Transformer) or over
        pairs (Attention/SetAttention), else None.
        """
        c = self.config
        if np.any(roles[valid] >= c.relation_count) or np.any(roles[valid] < 0):
            raise ValidationError("unknown relation id in edge")
        if c.multiset is MultisetKind.TRANSFORMER:
            if ent_pos is None:
                raise ConfigError("Transformer aggregation needs positional marks")
            xr, xe = self._pairs_to_tokens(x, roles, ents, ent_pos, role_pos)
            p = self.params
            cls = (p["ve.cls"] + p["pos_emb"][self._cls_pos()])[None]
            A = roles.shape[1]

            def make(rows, n):
                idx = torch.from_numpy(rows)
                return torch.cat([cls.expand(len(rows), 1, c.d), xr[idx, :n], xe[idx, :n]], dim=1)

            def width(n):
                if n is None:
                    return 1 + 2 * A
                return np.r_[0, 1:1 + n, 1 + A:1 + A + n]

            return self._bucketed("ve", valid.sum(axis=1), make, width, train, gen)
        xr, xe = self._pairs_to_tokens(x, roles, ents)
        return self._pool("ve", xr + xe, torch.from_numpy(valid), train, gen)

    def aggregate_e_to_v(self, h, x, members, train=False, gen=None):
        """Node embeddings from member-edge embeddings; nodes without edges keep ``x``.

        ``members`` is [N, M], padded on the right with -1.
        """
        c = self.config
        valid = members >= 0
        has = torch.from_numpy(valid.any(axis=1))
        if c.multiset is MultisetKind.TRANSFORMER:
            cls = self.params["ev.cls"][None]

            def make(rows, n):
                items = h[torch.from_numpy(members[rows, :n])]
                return torch.cat([cls.expand(len(rows), 1, c.d), items], dim=1)

            def width(n):
                return 1 + members.shape[1] if n is None else np.arange(1 + n)

            out, w = self._bucketed("ev", valid.sum(axis=1), make, width, train, gen)
        else:
            items = h[np.maximum(members, 0)]
            out, w = self._pool("ev", items, torch.from_numpy(valid), train, gen)
        return torch.where(has[:, None], out, x), w

    def _cls_pos(self):
        c = self.config
        return 0 if c.positions is PositionScheme.SAME else cls_position(c.max_arity)

    # ---- full pass

    def positions_for(self, batch: SubgraphBatch, rng: np.random.Generator):
        c = self.config
        if c.multiset is not MultisetKind.TRANSFORMER:
            return None, None
        return edge_positions(batch.valid, batch.missing, batch.primary, c.positions, rng,
                              c.max_arity, c.main_qualifier)

    def _plan(self, batch: SubgraphBatch, rounds: int, needed_nodes, needed_edges):
        """Per-round (edges to encode, nodes to update), walking back from what is read out.

        Anything outside these sets cannot influence the requested outputs.
        """
        E, N = len(batch.roles), len(batch.members)
        if needed_nodes is None and needed_edges is None:
            full = (np.arange(E), np.arange(0 if self.config.intra_edge else N))
            return [full] * rounds
        nodes = np.zeros(N, dtype=bool)
        if needed_nodes is not None:
            nodes[np.asarray(needed_nodes, dtype=np.int64)] = True
        edges = np.zeros(E, dtype=bool)
        if needed_edges is not None:
            edges[np.asarray(needed_edges, dtype=np.int64)] = True
        plan = [None] * rounds
        for t in reversed(range(rounds)):
            if self.config.intra_edge:
                plan[t] = (np.flatnonzero(edges), np.zeros(0, dtype=np.int64))
                continue
            mem = batch.members[nodes]
            edges[mem[mem >= 0]] = True
            plan[t] = (np.flatnonzero(edges), np.flatnonzero(nodes))
            ents = batch.ents[edges]
            nodes = nodes.copy()
            nodes[ents[ents >= 0]] = True
            edges = np.zeros(E, dtype=bool)
        return plan

    def forward(self, batch: SubgraphBatch, x0: torch.Tensor, rng: np.random.Generator,
                train: bool = False, gen: torch.Generator | None = None, trace: bool = False,
                labeler=None, needed_nodes=None, needed_edges=None):
        """K rounds of V->E then E->V.

        Returns ``(h [E, d], x [N, d], trace records or None)``.  Positional
        marks are drawn once from ``rng`` and reused by every round.  When
        ``needed_nodes``/``needed_edges`` are given, only work that feeds
        those rows is done; other rows of ``h``/``x`` are unspecified.
        """
        c = self.config
        if x0.shape != (len(batch.node_entity), c.d):
            raise ShapeError(f"initial embeddings {tuple(x0.shape)} do not cover {len(batch.node_entity)} nodes")
        if trace and c.multiset is not MultisetKind.TRANSFORMER:
            raise UnsupportedOperation("attention traces need the Transformer multiset kind")
        if trace:
            needed_nodes = needed_edges = None
        ent_pos, role_pos = self.positions_for(batch, rng)
        records = [] if trace else None
        x = x0
        rounds = 1 if c.intra_edge else c.K
        plan = self._plan(batch, rounds, needed_nodes, needed_edges)
        E = len(batch.roles)
        h = None
        for t, (erows, nrows) in enumerate(plan):
            pos = (ent_pos[erows], role_pos[erows]) if ent_pos is not None else (None, None)
            h_rows, w_ve = self.aggregate_v_to_e(x, batch.roles[erows], batch.ents[erows], batch.valid[erows],
                                                 *pos, train, gen)
            diff.check_finite(h_rows, "edge embeddings")
            h = h_rows if len(erows) == E else torch.zeros(E, c.d, dtype=DTYPE).index_copy(
                0, torch.from_numpy(erows), h_rows)
            if trace:
                records.extend(self._trace_ve(t + 1, batch, w_ve, labeler))
            if c.intra_edge:
                break
            x_rows, w_ev = self.aggregate_e_to_v(h, x[torch.from_numpy(nrows)], batch.members[nrows], train, gen)
            diff.check_finite(x_rows, "node embeddings")
            x = x_rows if len(nrows) == len(x) else x.index_copy(0, torch.from_numpy(nrows), x_rows)
            if trace:
                records.extend(self._trace_ev(t + 1, batch, w_ev, labeler))
        return h, x, records

    # ---- scoring

    @staticmethod
    def score(h_src: torch.Tensor, candidates: torch.Tensor) -> torch.Tensor:
        """sigmoid(h . x) for one source embedding [d] against candidates [C, d]."""
        return diff.sigmoid(NSHART.logits(h_src, candidates))

    @staticmethod
    def logits(h_src: torch.Tensor, candidates: torch.Tensor) -> torch.Tensor:
        if h_src.shape[-1] != candidates.shape[-1]:
            raise ShapeError(f"score dims differ: {tuple(h_src.shape)} vs {tuple(candidates.shape)}")
        return candidates @ h_src if h_src.dim() == 1 else (candidates * h_src[..., None, :]).sum(-1)

    # ---- trace helpers

    def _trace_ve(self, hop, batch, w, labeler):
        lab = labeler or _default_labeler
        out = []
        wn = w.detach().numpy()
        A = batch.roles.shape[1]
        for e in range(len(batch.roles)):
            toks = [("[CLS]", float(wn[e, 0]))]
            for j in range(A):
                if batch.valid[e, j]:
                    toks.append((lab.relation(int(batch.roles[e, j])), float(wn[e, 1 + j])))
            for j in range(A):
                if batch.valid[e, j]:
                    v = batch.ents[e, j]
                    name = "?" if v == -1 else lab.entity(int(batch.node_entity[v]))
                    toks.append((name, float(wn[e, 1 + A + j])))
            owner = "source" if batch.edge_ids[e] < 0 else f"edge:{int(batch.edge_ids[e])}"
            out.append(TraceRecord(hop, "V->E", owner, toks))
        return out

    def _trace_ev(self, hop, batch, w, labeler):
        lab = labeler or _default_labeler
        out = []
        wn = w.detach().numpy()
        for v in range(len(batch.members)):
            mem = batch.members[v]
            if not (mem >= 0).any():
                continue  # kept its input embedding, nothing was attended
            toks = [("[CLS]", float(wn[v, 0]))]
            for j, e in enumerate(mem):
                if e >= 0:
                    owner = "source" if batch.edge_ids[e] < 0 else f"edge:{int(batch.edge_ids[e])}"
                    toks.append((owner, float(wn[v, 1 + j])))
            out.append(TraceRecord(hop, "E->V", lab.entity(int(batch.node_entity[v])), toks))
        return out


class _DefaultLabeler:
    @staticmethod
    def relation(r):
        return f"r{r}"

    @staticmethod
    def entity(v):
        return f"v{v}"


_default_labeler = _DefaultLabeler()
