"""Filtered ranking metrics (MRR, HITS@k) and AUC-PR, split by slot kind."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .hypergraph import Query


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class RankResult:
    query_id: int
    slot_kind: str
    rank: int


def filtered_rank(scores, candidates, answer: int, filter_ids=()) -> int:
    """1-based rank of ``answer`` among ``candidates`` after dropping ``filter_ids``.

    Ties count against the answer: every other surviving candidate with a
    score >= the answer's is ranked above it.
    """
    scores = np.asarray(scores, dtype=np.float64)
    candidates = np.asarray(candidates)
    hit = np.flatnonzero(candidates == answer)
    if len(hit) == 0:
        raise MetricError(f"answer {answer} is not among the candidates")
    s_ans = scores[hit[0]]
    keep = candidates != answer
    if len(filter_ids):
        keep &= ~np.isin(candidates, np.asarray(list(filter_ids)))
    return 1 + int(np.count_nonzero(scores[keep] >= s_ans))


def ranking_metrics(ranks, k: int = 10) -> tuple[float, float]:
    """(MRR, HITS@k).  Sums are correctly rounded, so the result is order-independent."""
    r = [int(x) for x in ranks]
    if not r:
        raise MetricError("no ranks to aggregate")
    if min(r) < 1:
        raise MetricError("ranks start at 1")
    return math.fsum(1.0 / x for x in r) / len(r), sum(x <= k for x in r) / len(r)


def auc_pr(scores, labels) -> float:
    """Average precision: sum over score thresholds of (recall gain) x precision.

    Items sharing a score cross the threshold together.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise MetricError("AUC-PR needs at least one positive and one negative")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    seen = np.arange(1, len(y) + 1)
    last = np.r_[s[1:] != s[:-1], True]  # end of each tie block
    tp, seen = tp[last], seen[last]
    precision = tp / seen
    recall_gain = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(recall_gain * precision))


@dataclass
class MetricReport:
    mrr: float | None = None
    hits: float | None = None
    primary_mrr: float | None = None
    primary_hits: float | None = None
    qualifier_mrr: float | None = None
    qualifier_hits: float | None = None
    primary_count: int = 0
    qualifier_count: int = 0
    auc_pr: float | None = None
    k: int = 10
    ranks: list[RankResult] = field(default_factory=list, repr=False)

    @classmethod
    def from_ranks(cls, ranks: list[RankResult], k: int = 10) -> "MetricReport":
        rep = cls(k=k, ranks=list(ranks))
        rep.mrr, rep.hits = ranking_metrics([r.rank for r in ranks], k)
        for kind in ("primary", "qualifier"):
            sub = [r.rank for r in ranks if r.slot_kind == kind]
            setattr(rep, f"{kind}_count", len(sub))
            if sub:
                m, h = ranking_metrics(sub, k)
                setattr(rep, f"{kind}_mrr", m)
                setattr(rep, f"{kind}_hits", h)
        return rep

    def headline(self) -> float:
        return self.auc_pr if self.auc_pr is not None else self.mrr

    def to_json(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "ranks"}
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)

    def table(self) -> str:
        rows = []
        if self.auc_pr is not None:
            rows.append(("all", "AUC-PR", self.auc_pr, self.primary_count + self.qualifier_count))
        else:
            rows.append(("all", "MRR", self.mrr, self.primary_count + self.qualifier_count))
            rows.append(("all", f"HITS@{self.k}", self.hits, self.primary_count + self.qualifier_count))
            for kind in ("primary", "qualifier"):
                n = getattr(self, f"{kind}_count")
                if n:
                    rows.append((kind, "MRR", getattr(self, f"{kind}_mrr"), n))
                    rows.append((kind, f"HITS@{self.k}", getattr(self, f"{kind}_hits"), n))
        lines = [f"{'slots':<10} {'metric':<8} {'value':>8} {'count':>6}"]
        lines += [f"{a:<10} {b:<8} {c:>8.4f} {n:>6d}" for a, b, c, n in rows]
        return "\n".join(lines)

    def write_ranks_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["query_id", "slot_kind", "rank"])
            for r in self.ranks:
                w.writerow([r.query_id, r.slot_kind, r.rank])


def evaluate_split(trainer, graph_ctx, queries: list[Query], seed: int | None = None,
                   candidates=None, batch_size: int | None = None, k: int = 10) -> MetricReport:
    """Evaluate ``queries`` against the graph in ``graph_ctx``.

    TR tasks: each query gets its own subgraph and every candidate entity is
    scored (entities outside the subgraph keep initial embeddings).  PSR:
    one positive and one sampled negative per query, scored independently.
    """
    cfg = trainer.config
    seed = cfg.eval_seed if seed is None else seed
    bs = batch_size or cfg.batch_size
    if cfg.task == "PSR":
        scores, labels = [], []
        for start in range(0, len(queries), bs):
            chunk = list(enumerate(queries[start:start + bs], start=start))
            s, y = trainer.psr_scores(graph_ctx, chunk, seed)
            scores.extend(s)
            labels.extend(y)
        rep = MetricReport(k=k, auc_pr=auc_pr(scores, labels))
        rep.primary_count = sum(q.slot_kind == "primary" for q in queries)
        rep.qualifier_count = len(queries) - rep.primary_count
        return rep

    if candidates is None:
        pool = set(graph_ctx.graph.entities_in_use().tolist())
        pool |= {q.answer for q in queries if q.answer is not None}
        candidates = np.asarray(sorted(pool), dtype=np.int64)
    ranks: list[RankResult] = []
    with torch.no_grad():
        for start in range(0, len(queries), bs):
            chunk = list(enumerate(queries[start:start + bs], start=start))
            all_scores = trainer.tr_scores(graph_ctx, chunk, candidates, seed)
            for (qid, q), sc in zip(chunk, all_scores):
                filt = graph_ctx.filter_ids(q)
                ranks.append(RankResult(qid, q.slot_kind, filtered_rank(sc, candidates, q.answer, filt)))
    return MetricReport.from_ranks(ranks, k)
