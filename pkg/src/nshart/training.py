"""Initialization, negative sampling, loss, optimization and the epoch loop."""

from __future__ import annotations

import configparser
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F

from . import diff
from .diff import DTYPE, ConfigError, NumericError, ShapeError
from .hypergraph import Hyperedge, Query, SemanticHypergraph, ValidationError
from .kernels import derive_seed
from .model import ModelConfig, MultisetKind, NSHART, SubgraphBatch
from .sampler import (
    fanout_schedule,
    sample_pair_subgraph,
    sample_query_subgraph,
    source_only_subgraph,
)

log = logging.getLogger(__name__)

TASKS = ("TR-EF", "TR-NEF", "PSR")
LR_GRID = (1e-5, 5e-5, 1e-4, 5e-4)
DROPOUT_GRID = (0.1, 0.2, 0.3)


@dataclass
class TrainConfig:
    """Training/model hyperparameters.  ``None`` fields resolve per task."""

    task: str = "TR-NEF"
    batch_size: int = 128
    d: int = 200
    max_arity: int = 7
    layers: int = 2
    heads: int = 4
    hidden: int = 512
    K: int = 2
    m: int = 16
    e2v_cap: int | None = None       # 2m
    negatives: int | None = None     # 50 for TR, 1 for PSR
    subgraph_negatives: int = 0      # TR: how many of the negatives come from the query's subgraph
    lr: float = 1e-4
    dropout: float = 0.1
    epochs: int | None = None        # 300 for TR, 50 for PSR
    seed: int = 0
    eval_seed: int = 12345
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    lr_min: float | None = None      # lr / 100
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    multiset: str = "transformer"
    positions: str = "random"
    main_qualifier: bool = False
    intra_edge: bool = False
    binary_split: bool = False
    eval_every: int = 1
    threads: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.e2v_cap is None:
            self.e2v_cap = 2 * self.m
        if self.negatives is None:
            self.negatives = 1 if self.task == "PSR" else 50
        if self.epochs is None:
            self.epochs = 50 if self.task == "PSR" else 300
        if self.lr_min is None:
            self.lr_min = self.lr / 100
        for f in ("batch_size", "d", "max_arity", "layers", "heads", "hidden", "K", "m",
                  "e2v_cap", "negatives", "epochs", "threads", "eval_every"):
            if getattr(self, f) <= 0:
                raise ConfigError(f"{f} must be positive")
        if not 0 <= self.subgraph_negatives <= self.negatives:
            raise ConfigError("subgraph_negatives must be between 0 and negatives")
        if self.lr < 0 or not 0 <= self.dropout < 1:
            raise ConfigError("lr must be >= 0 and dropout in [0, 1)")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        MultisetKind(self.multiset)

    def model_config(self, relation_count: int, feature_dim: int = 0) -> ModelConfig:
        return ModelConfig(
            relation_count=relation_count, d=self.d, layers=self.layers, heads=self.heads,
            hidden=self.hidden, K=self.K, dropout=self.dropout, multiset=self.multiset,
            positions=self.positions, main_qualifier=self.main_qualifier,
            max_arity=self.max_arity, task=self.task, feature_dim=feature_dim,
            intra_edge=self.intra_edge,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path=None, **overrides) -> TrainConfig:
    """Read a ``[train]`` section of ``key = value`` lines; unknown keys are errors."""
    values: dict = {}
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keys are case-sensitive field names
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        if "train" not in parser:
            raise ConfigError(f"{path}: missing [train] section")
        types = {f.name: f.type for f in fields(TrainConfig)}
        for key, raw in parser["train"].items():
            if key not in types:
                raise ConfigError(f"{path}: unknown key {key!r}")
            values[key] = _coerce(raw, types[key], key)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def _coerce(raw: str, typ, key):
    t = str(typ)
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        return None
    try:
        if t.startswith("bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if t.startswith("int"):
            return int(raw)
        if t.startswith("float"):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def write_default_config(path, cfg: TrainConfig | None = None):
    cfg = cfg or TrainConfig()
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser["train"] = {k: "none" if v is None else str(v) for k, v in cfg.to_dict().items()}
    with open(path, "w") as fh:
        parser.write(fh)


# -- graph context -------------------------------------------------------------


class FilterIndex:
    """Maps a query pattern (missing role + known pairs) to every true answer."""

    def __init__(self, facts=()):
        self._index: dict = {}
        self.add(facts)

    def add(self, facts):
        for f in facts:
            for i in range(f.arity):
                self._index.setdefault(Query.from_fact(f, i).pattern_key(), set()).add(f.pairs[i].entity)

    def answers(self, query: Query) -> set[int]:
        return self._index.get(query.pattern_key(), set())


class GraphContext:
    """A graph plus everything needed to embed and filter against it."""

    def __init__(self, graph: SemanticHypergraph, filters: FilterIndex, features: np.ndarray | None = None,
                 ablate: list | None = None):
        self.graph = graph
        self.ablate = ablate
        self.filters = filters
        self.features = None if features is None else torch.as_tensor(features, dtype=DTYPE)
        self.in_use = graph.entities_in_use()
        rows, cols, vals = [], [], []
        for v, inc in enumerate(graph.incidence):
            for _, r in inc:
                rows.append(v)
                cols.append(r)
                vals.append(1.0 / len(inc))
        idx = torch.tensor([rows, cols], dtype=torch.int64).reshape(2, -1)
        self.role_mean = torch.sparse_coo_tensor(
            idx, torch.tensor(vals, dtype=DTYPE), (graph.entity_count, graph.relation_count),
            check_invariants=True,
        ).coalesce()

    def filter_ids(self, query: Query) -> set[int]:
        return self.filters.answers(query) - {query.answer}


def init_entity_embeddings(task: str, ctx: GraphContext, model: NSHART):
    """Initial entity embeddings for a TR task as an [entities, d] tensor.

    TR-NEF averages the embeddings of every role an entity plays; TR-EF
    projects entity features.  PSR embeddings depend on the subgraph and are
    produced by :func:`psr_node_embeddings`.
    """
    p = model.params
    if task == "TR-NEF":
        return torch.sparse.mm(ctx.role_mean, p["relation_emb"])
    if task == "TR-EF":
        feats = ctx.features
        if feats is None:
            raise ValidationError("TR-EF needs an entity feature matrix")
        if feats.shape[0] < ctx.graph.entity_count:
            missing = list(range(feats.shape[0], ctx.graph.entity_count))
        else:
            missing = [int(v) for v in ctx.in_use if torch.isnan(feats[v]).any()]
        if missing:
            raise ValidationError(f"features missing for entities {missing[:20]}")
        return torch.nan_to_num(feats[:ctx.graph.entity_count]) @ p["feature_proj"]
    raise ConfigError(f"task {task} has no graph-level initial embeddings")


def psr_node_embeddings(model: NSHART, node_dist: np.ndarray) -> torch.Tensor:
    K = model.config.K
    return model.params["distance_emb"][torch.from_numpy(np.minimum(node_dist, K + 1))]


# -- sampling, loss, optimizer -------------------------------------------------


def negative_sample(query: Query, task: str, pool, count: int, rng: np.random.Generator,
                    filter_set=()) -> tuple[list[int], bool]:
    """Distinct negatives drawn uniformly from ``pool`` minus ``filter_set``.

    ``pool`` is the graph's entities for TR tasks and the subgraph's nodes
    for PSR.  Returns ``(negatives, short)``; ``short`` flags a pool smaller
    than ``count`` (the whole pool is returned then).
    """
    if count < 1:
        raise ConfigError("negative count must be >= 1")
    excluded = set(filter_set)
    if query.answer is not None:
        excluded.add(query.answer)
    if task == "PSR":
        excluded |= set(query.known_entities)
    pool = np.asarray(pool, dtype=np.int64)
    cand = pool[~np.isin(pool, np.fromiter(excluded, dtype=np.int64, count=len(excluded)))]
    cand = np.unique(cand)
    if len(cand) <= count:
        return cand.tolist(), len(cand) < count
    return np.sort(rng.choice(cand, size=count, replace=False)).tolist(), False


def bce_loss(probs: torch.Tensor, labels: torch.Tensor, clamp: float = 1e-7,
             logits: torch.Tensor | None = None) -> torch.Tensor:
    """Summed binary cross entropy with probabilities clamped to [clamp, 1 - clamp].

    If ``logits`` (with ``probs == sigmoid(logits)``) are passed, the value is
    unchanged but the gradient is taken from the unclamped log-sigmoid form,
    so confidently wrong predictions still get pushed back.
    """
    if probs.shape != labels.shape:
        raise ShapeError(f"probabilities {tuple(probs.shape)} vs labels {tuple(labels.shape)}")
    p = probs.clamp(clamp, 1.0 - clamp)
    value = -(labels * torch.log(p) + (1.0 - labels) * torch.log(1.0 - p)).sum()
    if logits is None:
        return value
    if logits.shape != labels.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    smooth = (labels * F.softplus(-logits) + (1.0 - labels) * F.softplus(logits)).sum()
    return smooth + (value - smooth).detach()


@dataclass
class AdamWState:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: diff.ParamStore, grads: dict, state: AdamWState, lr: float):
    """One AdamW update in place: decoupled decay, then bias-corrected Adam."""
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for name, theta in params:
            g = grads[name]
            if g.shape != theta.shape:
                raise ShapeError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(theta.shape)}")
            m = state.m.setdefault(name, torch.zeros_like(theta))
            v = state.v.setdefault(name, torch.zeros_like(theta))
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            theta.mul_(1.0 - lr * state.weight_decay)
            theta.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))


@dataclass
class PlateauState:
    lr: float
    factor: float = 0.5
    patience: int = 5
    lr_min: float = 0.0
    best: float = -math.inf
    bad: int = 0


def plateau_step(state: PlateauState, metric: float) -> float:
    """Cut the learning rate after ``patience`` evaluations without a new best (higher is better)."""
    if not math.isfinite(metric):
        raise NumericError(f"validation metric {metric} is not finite")
    if metric > state.best:
        state.best = metric
        state.bad = 0
    else:
        state.bad += 1
        if state.bad >= state.patience:
            state.lr = max(state.lr * state.factor, state.lr_min)
            state.bad = 0
    return state.lr


def training_instances(graph: SemanticHypergraph, ablate: list | None = None) -> list[Query]:
    """One query per ablatable slot of every fact (the full fact is the source edge).

    ``ablate[i]`` lists the slots of edge ``i`` that may be queried; ``None``
    (for the whole list or one entry) means every slot.
    """
    if ablate is not None and len(ablate) != graph.edge_count:
        raise ValidationError(f"ablate list covers {len(ablate)} facts, graph has {graph.edge_count}")
    out = []
    for e in graph.edges:
        slots = None if ablate is None else ablate[e.id]
        out.extend(Query.from_fact(e, i, source_edge=e.id) for i in (range(e.arity) if slots is None else slots))
    return out


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    examples: int
    lr: float
    valid_metric: float | None = None
    short_negatives: int = 0

    def to_json(self) -> dict:
        return asdict(self)


# -- trainer --------------------------------------------------------------------


def _locate(batch: SubgraphBatch, b: int, ids: np.ndarray) -> np.ndarray:
    """Batch-local node index of each entity in subgraph ``b``, -1 if absent."""
    lo, hi = batch.node_offset[b], batch.node_offset[b + 1]
    nodes = batch.node_entity[lo:hi]
    order = np.argsort(nodes, kind="stable")
    srt = nodes[order]
    pos = np.minimum(np.searchsorted(srt, ids), len(srt) - 1)
    found = srt[pos] == ids
    return np.where(found, order[pos] + lo, -1)


class Trainer:
    """Owns the model, optimizer and schedule for one task."""

    def __init__(self, config: TrainConfig, relation_count: int, feature_dim: int = 0):
        self.config = config
        torch.set_num_threads(config.threads)
        self.model = NSHART(config.model_config(relation_count, feature_dim), seed=config.seed)
        self.schedule = fanout_schedule(config.m, config.K)
        self.opt = AdamWState((config.beta1, config.beta2), config.adam_eps, config.weight_decay)
        self.plateau = PlateauState(config.lr, config.plateau_factor, config.plateau_patience, config.lr_min)

    # ---- subgraphs

    def query_subgraph(self, graph, query, seed):
        if self.config.intra_edge:
            return source_only_subgraph(graph, query, self.config.K)
        return sample_query_subgraph(graph, query, self.config.K, self.schedule, seed, self.config.e2v_cap)

    def pair_subgraph(self, graph, query, target, seed):
        if self.config.intra_edge:
            sub = source_only_subgraph(graph, query, self.config.K)
            if target not in set(sub.nodes.tolist()):
                sub.nodes = np.append(sub.nodes, target)
                sub.hop_distance = np.append(sub.hop_distance, self.config.K + 1)
                sub.memberships.append(np.zeros(0, dtype=np.int64))
            sub.target = int(target)
            return sub
        return sample_pair_subgraph(graph, query, target, self.config.K, self.schedule, seed, self.config.e2v_cap)

    def _node_init(self, ctx, batch, x_all=None):
        if self.config.task == "PSR":
            return psr_node_embeddings(self.model, batch.node_dist)
        return x_all[torch.from_numpy(batch.node_entity)]

    # ---- TR

    def _tr_forward(self, ctx, queries, seeds, rng, train, gen, candidates=None, subs=None):
        """``candidates``: per-query entity arrays whose embeddings will be read."""
        if subs is None:
            subs = [self.query_subgraph(ctx.graph, q, s) for q, s in zip(queries, seeds)]
        batch = SubgraphBatch.build(ctx.graph, subs)
        x_all = init_entity_embeddings(self.config.task, ctx, self.model)
        local = None
        if candidates is not None:
            local = [_locate(batch, b, np.asarray(c, dtype=np.int64)) for b, c in enumerate(candidates)]
            used = np.concatenate(local)
            needed = used[used >= 0]
        h, x, _ = self.model.forward(batch, self._node_init(ctx, batch, x_all), rng, train, gen,
                                     needed_nodes=None if local is None else needed,
                                     needed_edges=batch.src_edge)
        return batch, x_all, h, x, local

    def tr_negatives(self, query, sub, pool, rng, filter_set) -> tuple[list[int], bool]:
        """``negatives`` entities: up to ``subgraph_negatives`` from the subgraph, the rest from ``pool``."""
        cfg = self.config
        hard: list[int] = []
        if cfg.subgraph_negatives:
            hard, _ = negative_sample(query, cfg.task, sub.nodes, cfg.subgraph_negatives, rng, filter_set)
        rest, short = negative_sample(query, cfg.task, pool, cfg.negatives - len(hard), rng,
                                      set(filter_set) | set(hard))
        return sorted(hard + rest), short

    def tr_loss(self, ctx, queries, seeds, rng, gen, negatives, subs=None):
        if len({len(n) for n in negatives}) != 1:
            raise ConfigError("negative pool too small: queries got different negative counts")
        cand = np.asarray([[q.answer] + negs for q, negs in zip(queries, negatives)], dtype=np.int64)
        batch, x_all, h, x, local = self._tr_forward(ctx, queries, seeds, rng, True, gen, list(cand), subs)
        local = np.stack(local)
        inside = torch.from_numpy(local >= 0)[..., None]
        emb = torch.where(inside, x[torch.from_numpy(np.maximum(local, 0))], x_all[torch.from_numpy(cand)])
        logits = NSHART.logits(h[torch.from_numpy(batch.src_edge)], emb)
        labels = torch.zeros_like(logits)
        labels[:, 0] = 1.0
        return bce_loss(diff.sigmoid(logits), labels, logits=logits) / len(queries)

    def tr_scores(self, ctx, chunk, candidates, seed):
        """Raw inner-product scores of every candidate for each query in ``chunk``."""
        queries = [q for _, q in chunk]
        seeds = [derive_seed(seed, qid) for qid, _ in chunk]
        rng = np.random.default_rng(derive_seed(seed, chunk[0][0], 1))
        with torch.no_grad():
            batch, x_all, h, x, _ = self._tr_forward(ctx, queries, seeds, rng, False, None,
                                                     [candidates] * len(queries))
            base = x_all[torch.from_numpy(candidates)]
            out = []
            for b in range(len(queries)):
                hs = h[batch.src_edge[b]]
                sc = base @ hs
                lo, hi = batch.node_offset[b], batch.node_offset[b + 1]
                ents = batch.node_entity[lo:hi]
                pos = np.searchsorted(candidates, ents)
                ok = (pos < len(candidates)) & (candidates[np.minimum(pos, len(candidates) - 1)] == ents)
                if ok.any():
                    sc[torch.from_numpy(pos[ok])] = x[torch.from_numpy(np.arange(lo, hi)[ok])] @ hs
                out.append(sc.numpy().copy())
        return out

    # ---- PSR

    def _psr_forward(self, ctx, items, rng, train, gen, presampled=None):
        """``items``: (query, target, seed) triples; ``presampled[i]`` may hold item i's subgraph."""
        presampled = presampled or {}
        subs = [presampled.get(i) or self.pair_subgraph(ctx.graph, q, t, s) for i, (q, t, s) in enumerate(items)]
        batch = SubgraphBatch.build(ctx.graph, subs)
        tloc = np.asarray([_locate(batch, b, np.asarray([t]))[0] for b, (_, t, _) in enumerate(items)])
        h, x, _ = self.model.forward(batch, self._node_init(ctx, batch), rng, train, gen,
                                     needed_nodes=tloc, needed_edges=batch.src_edge)
        return NSHART.logits(h[torch.from_numpy(batch.src_edge)], x[torch.from_numpy(tloc)][:, None, :])[:, 0]

    def psr_items(self, ctx, query, seed, rng):
        """Positive item plus negatives drawn from the positive's input subgraph.

        Returns ``(items, short, positive subgraph)``.
        """
        pos_sub = self.pair_subgraph(ctx.graph, query, query.answer, seed)
        filt = ctx.filters.answers(query)
        negs, short = negative_sample(query, "PSR", pos_sub.nodes, self.config.negatives, rng, filt)
        items = [(query, query.answer, seed, 1.0)]
        items += [(query, n, derive_seed(seed, n, 7), 0.0) for n in negs]
        return items, short, pos_sub

    def psr_scores(self, ctx, chunk, seed):
        items, pre = [], {}
        for qid, q in chunk:
            qseed = derive_seed(seed, qid)
            rng = np.random.default_rng(derive_seed(qseed, 3))
            pos_sub = self.pair_subgraph(ctx.graph, q, q.answer, qseed)
            negs, _ = negative_sample(q, "PSR", pos_sub.nodes, 1, rng, ctx.filters.answers(q))
            pre[len(items)] = pos_sub
            items.append((q, q.answer, qseed, 1.0))
            items += [(q, n, derive_seed(qseed, n, 7), 0.0) for n in negs]
        rng = np.random.default_rng(derive_seed(seed, chunk[0][0], 1))
        with torch.no_grad():
            s = self._psr_forward(ctx, [(q, t, sd) for q, t, sd, _ in items], rng, False, None, pre)
        return s.numpy().tolist(), [y for *_, y in items]

    # ---- attention traces

    def trace_query(self, ctx, query, seed, labeler=None) -> list:
        """Attention records for every stage and hop of one query's forward pass."""
        if self.config.task == "PSR":
            sub = self.pair_subgraph(ctx.graph, query, query.answer, seed)
        else:
            sub = self.query_subgraph(ctx.graph, query, seed)
        batch = SubgraphBatch.build(ctx.graph, [sub])
        x_all = None if self.config.task == "PSR" else init_entity_embeddings(self.config.task, ctx, self.model)
        rng = np.random.default_rng(derive_seed(seed, 1))
        with torch.no_grad():
            _, _, records = self.model.forward(batch, self._node_init(ctx, batch, x_all), rng,
                                               trace=True, labeler=labeler)
        return records

    # ---- epochs

    def train_epoch(self, ctx: GraphContext, epoch: int) -> EpochStats:
        cfg = self.config
        instances = training_instances(ctx.graph, ctx.ablate)
        if not instances:
            raise ValidationError("no training instances: every slot is marked non-ablatable")
        order = np.random.default_rng(derive_seed(cfg.seed, epoch, 0)).permutation(len(instances))
        total, seen, short = 0.0, 0, 0
        pool = ctx.in_use
        for bstart in range(0, len(order), cfg.batch_size):
            idx = order[bstart:bstart + cfg.batch_size]
            bseed = derive_seed(cfg.seed, epoch, 1, bstart)
            rng = np.random.default_rng(bseed)
            gen = torch.Generator().manual_seed(bseed & 0x7FFFFFFFFFFFFFFF)
            queries = [instances[i] for i in idx]
            seeds = [derive_seed(cfg.seed, epoch, 2, int(i)) for i in idx]
            self.model.params.zero_grad()
            if cfg.task == "PSR":
                items, labels, pre = [], [], {}
                for q, s in zip(queries, seeds):
                    its, sh, pre[len(items)] = self.psr_items(ctx, q, s, rng)
                    short += sh
                    items += [(a, b, c) for a, b, c, _ in its]
                    labels += [y for *_, y in its]
                logits = self._psr_forward(ctx, items, rng, True, gen, pre)
                y = torch.tensor(labels, dtype=DTYPE)
                loss = bce_loss(diff.sigmoid(logits), y, logits=logits) / len(queries)
            else:
                subs = [self.query_subgraph(ctx.graph, q, s) for q, s in zip(queries, seeds)]
                negatives = []
                for q, sub in zip(queries, subs):
                    negs, sh = self.tr_negatives(q, sub, pool, rng, ctx.filters.answers(q))
                    short += sh
                    negatives.append(negs)
                loss = self.tr_loss(ctx, queries, seeds, rng, gen, negatives, subs)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch starting {bstart}")
            grads = diff.backward(loss, self.model.params)
            adamw_step(self.model.params, grads, self.opt, self.plateau.lr)
            total += loss.item() * len(queries)
            seen += len(queries)
        return EpochStats(epoch, total / max(seen, 1), seen, self.plateau.lr, short_negatives=short)

    def fit(self, bundle, on_epoch=None, epochs: int | None = None) -> list[EpochStats]:
        """Train on the bundle's training graph; select by validation metric."""
        from .evaluation import evaluate_split

        cfg = self.config
        train_ctx, inf_ctx = contexts(bundle, cfg)
        history = []
        best, best_params = -math.inf, None
        for epoch in range(epochs or cfg.epochs):
            stats = self.train_epoch(train_ctx, epoch)
            if bundle.valid_queries and (epoch + 1) % cfg.eval_every == 0:
                rep = evaluate_split(self, inf_ctx, bundle.valid_queries)
                stats.valid_metric = rep.headline()
                plateau_step(self.plateau, stats.valid_metric)
                if stats.valid_metric > best:
                    best, best_params = stats.valid_metric, self.model.params.snapshot()
            history.append(stats)
            log.info("epoch %d loss %.5f lr %.2e valid %s", epoch, stats.mean_loss, stats.lr, stats.valid_metric)
            if on_epoch:
                on_epoch(stats)
        if best_params is not None:
            with torch.no_grad():
                for name, t in self.model.params:
                    t.copy_(torch.from_numpy(best_params[name]))
        return history

    # ---- checkpoints

    def save(self, path, extra: dict | None = None):
        meta = {"train_config": self.config.to_dict(), "model_config": self.model.config.to_json()}
        meta.update(extra or {})
        diff.save_checkpoint(path, self.model.params, meta)

    @classmethod
    def load(cls, path) -> "Trainer":
        tensors, meta = diff.load_checkpoint(path)
        cfg = TrainConfig(**meta["train_config"])
        mc = meta["model_config"]
        tr = cls(cfg, mc["relation_count"], mc["feature_dim"])
        with torch.no_grad():
            for name, t in tr.model.params:
                if name not in tensors:
                    raise ValueError(f"checkpoint {path} lacks parameter {name}")
                t.copy_(torch.from_numpy(tensors[name]))
        return tr


def contexts(bundle, cfg: TrainConfig) -> tuple[GraphContext, GraphContext]:
    """Training and inference graph contexts sharing one filter index."""
    from .hypergraph import binary_split

    filters = FilterIndex()
    for facts in (bundle.train_graph.edges, bundle.inference_graph.edges, bundle.valid_facts, bundle.test_facts):
        filters.add(facts)
    tg, ig = bundle.train_graph, bundle.inference_graph
    ablate = [r.ablate for r in bundle.records["train"]]
    if all(a is None for a in ablate):
        ablate = None
    if cfg.binary_split:
        # split edges no longer line up with the records; query every slot
        tg, ig, ablate = binary_split(tg), binary_split(ig), None
    return GraphContext(tg, filters, bundle.features, ablate), GraphContext(ig, filters, bundle.features)
