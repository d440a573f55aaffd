"""Dataset bundles: JSON-lines facts on disk and the planted-rule generator.

Directory layout::

    manifest.json      counts and arity statistics (checked on load)
    train.jsonl        training graph facts
    inference.jsonl    inference graph facts (entities disjoint from train)
    valid.jsonl        validation facts
    test.jsonl         test facts
    features.tsv       optional: entity name, then feature floats

Each fact line is ``{"pairs": [[role, entity], ...], "primary": [bool, ...]}``
with an optional ``"ablate": [slot, ...]`` listing which slots become
queries (all slots when absent).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hypergraph import DEFAULT_MAX_ARITY, Hyperedge, Query, SemanticHypergraph, ValidationError, build_hypergraph

SPLITS = ("train", "inference", "valid", "test")


class GenerationError(RuntimeError):
    pass


@dataclass
class Record:
    pairs: list[tuple[str, str]]
    primary: list[bool]
    ablate: list[int] | None = None

    def to_json(self) -> dict:
        out = {"pairs": [list(p) for p in self.pairs], "primary": list(self.primary)}
        if self.ablate is not None:
            out["ablate"] = list(self.ablate)
        return out

    @classmethod
    def from_json(cls, obj) -> "Record":
        pairs = [(str(r), str(v)) for r, v in obj["pairs"]]
        primary = [bool(b) for b in obj.get("primary", [True] * len(pairs))]
        if len(primary) != len(pairs):
            raise ValidationError("primary flags must match pair count")
        return cls(pairs, primary, obj.get("ablate"))


@dataclass
class DatasetBundle:
    entities: list[str]
    relations: list[str]
    records: dict[str, list[Record]]
    train_graph: SemanticHypergraph
    inference_graph: SemanticHypergraph
    valid_facts: list[Hyperedge]
    test_facts: list[Hyperedge]
    valid_queries: list[Query]
    test_queries: list[Query]
    features: np.ndarray | None = None
    manifest: dict = field(default_factory=dict)

    @property
    def relation_count(self) -> int:
        return len(self.relations)

    @property
    def feature_dim(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    def entity_id(self, name: str) -> int:
        return self.entities.index(name)

    def same_content(self, other: "DatasetBundle") -> bool:
        if self.entities != other.entities or self.relations != other.relations:
            return False
        for s in SPLITS:
            a = [r.to_json() for r in self.records[s]]
            b = [r.to_json() for r in other.records[s]]
            if a != b:
                return False
        if (self.features is None) != (other.features is None):
            return False
        return self.features is None or np.array_equal(self.features, other.features)


class Labeler:
    """Maps ids back to names for traces and dumps."""

    def __init__(self, bundle: DatasetBundle):
        self.bundle = bundle

    def relation(self, r: int) -> str:
        return self.bundle.relations[r]

    def entity(self, v: int) -> str:
        return self.bundle.entities[v]


def compute_manifest(records: dict[str, list[Record]], feature_dim: int = 0) -> dict:
    def ents(split_names):
        return {v for s in split_names for rec in records[s] for _, v in rec.pairs}

    arities = [len(r.pairs) for s in SPLITS for r in records[s]]
    return {
        "facts": {s: len(records[s]) for s in SPLITS},
        "train_entities": len(ents(["train"])),
        "inference_entities": len(ents(["inference", "valid", "test"])),
        "relations": len({r for s in SPLITS for rec in records[s] for r, _ in rec.pairs}),
        "min_arity": min(arities) if arities else 0,
        "max_arity": max(arities) if arities else 0,
        "nary_proportion": {
            s: (round(sum(len(r.pairs) > 2 for r in records[s]) / len(records[s]), 6) if records[s] else 0.0)
            for s in SPLITS
        },
        "feature_dim": feature_dim,
    }


def bundle_from_records(records: dict[str, list[Record]], features: dict[str, list[float]] | None = None,
                        max_arity: int = DEFAULT_MAX_ARITY, manifest: dict | None = None) -> DatasetBundle:
    """Intern names (first appearance, split order) and build both graphs."""
    ent_ix: dict[str, int] = {}
    rel_ix: dict[str, int] = {}
    for s in SPLITS:
        for rec in records.get(s, []):
            for r, v in rec.pairs:
                rel_ix.setdefault(r, len(rel_ix))
                ent_ix.setdefault(v, len(ent_ix))
    records = {s: list(records.get(s, [])) for s in SPLITS}

    train_ents = {v for rec in records["train"] for _, v in rec.pairs}
    for s in ("inference", "valid", "test"):
        overlap = sorted(train_ents & {v for rec in records[s] for _, v in rec.pairs})
        if overlap:
            raise ValidationError(f"{s} split shares entities with train: {overlap[:10]}")

    def to_edge(rec: Record, i: int, split: str) -> Hyperedge:
        if len(rec.pairs) > max_arity:
            raise ValidationError(f"{split} fact {i}: arity {len(rec.pairs)} exceeds max arity {max_arity}")
        return Hyperedge.of([(rel_ix[r], ent_ix[v]) for r, v in rec.pairs], rec.primary)

    n_ent, n_rel = len(ent_ix), len(rel_ix)
    facts = {s: [to_edge(rec, i, s) for i, rec in enumerate(records[s])] for s in SPLITS}
    train_graph = build_hypergraph(facts["train"], n_ent, n_rel, max_arity)
    inference_graph = build_hypergraph(facts["inference"], n_ent, n_rel, max_arity)

    def queries(split):
        out = []
        for rec, f in zip(records[split], facts[split]):
            slots = rec.ablate if rec.ablate is not None else range(f.arity)
            for i in slots:
                if not 0 <= i < f.arity:
                    raise ValidationError(f"{split}: ablate slot {i} out of range")
                out.append(Query.from_fact(f, i))
        return out

    feat = None
    dim = 0
    if features:
        dim = len(next(iter(features.values())))
        feat = np.full((n_ent, dim), np.nan)
        for name, row in features.items():
            if len(row) != dim:
                raise ValidationError(f"feature row for {name!r} has {len(row)} values, expected {dim}")
            if name in ent_ix:
                feat[ent_ix[name]] = row

    computed = compute_manifest(records, dim)
    if manifest is not None:
        diffs = {k: (manifest.get(k), v) for k, v in computed.items() if manifest.get(k) != v}
        if diffs:
            raise ValidationError(f"manifest mismatch (stated, recounted): {diffs}")
    return DatasetBundle(
        entities=list(ent_ix), relations=list(rel_ix), records=records,
        train_graph=train_graph, inference_graph=inference_graph,
        valid_facts=facts["valid"], test_facts=facts["test"],
        valid_queries=queries("valid"), test_queries=queries("test"),
        features=feat, manifest=computed,
    )


def load_dataset(directory, max_arity: int = DEFAULT_MAX_ARITY) -> DatasetBundle:
    d = Path(directory)
    manifest_path = d / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else None
    records = {}
    for s in SPLITS:
        path = d / f"{s}.jsonl"
        recs = []
        if path.exists():
            for n, line in enumerate(path.read_text().splitlines(), start=1):
                if line.strip():
                    try:
                        recs.append(Record.from_json(json.loads(line)))
                    except (KeyError, ValueError, TypeError) as exc:
                        raise ValidationError(f"{path}:{n}: {exc}") from exc
        records[s] = recs
    features = None
    fpath = d / "features.tsv"
    if fpath.exists():
        features = {}
        for line in fpath.read_text().splitlines():
            if line.strip():
                name, *vals = line.split("\t")
                features[name] = [float(x) for x in vals]
    return bundle_from_records(records, features, max_arity, manifest)


def save_dataset(bundle: DatasetBundle, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for s in SPLITS:
        with open(d / f"{s}.jsonl", "w") as fh:
            for rec in bundle.records[s]:
                fh.write(json.dumps(rec.to_json()) + "\n")
    if bundle.features is not None:
        with open(d / "features.tsv", "w") as fh:
            for i, name in enumerate(bundle.entities):
                row = bundle.features[i]
                if not np.isnan(row).any():
                    fh.write(name + "\t" + "\t".join(repr(float(x)) for x in row) + "\n")
    (d / "manifest.json").write_text(json.dumps(bundle.manifest, indent=2, sort_keys=True) + "\n")


# -- planted-rule generator ------------------------------------------------------------


@dataclass
class SynthConfig:
    """Sizes per side ("train" graph and the fresh "inference" side)."""

    persons: tuple[int, int] = (180, 120)
    companies: tuple[int, int] = (45, 30)
    projects: tuple[int, int] = (70, 50)
    positions: int = 5
    acquaintances: tuple[int, int] = (20, 12)
    cooperations: tuple[int, int] = (160, 200)
    noise: float = 0.1
    split: tuple[float, float, float] = (0.55, 0.20, 0.25)
    seed: int = 0
    query_slots: str = "party"   # "party": second party only; "cooperate": second party and project
    train_all_slots: bool = False  # query every slot of every training fact

    def __post_init__(self):
        if not 0.0 <= self.noise < 1.0:
            raise GenerationError(f"noise rate must be in [0, 1), got {self.noise}")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise GenerationError("split fractions must sum to 1")
        if self.query_slots not in ("party", "cooperate"):
            raise GenerationError(f"query_slots must be 'party' or 'cooperate', got {self.query_slots!r}")


WORKS_AT = ("works_at.person", "works_at.company", "works_at.position")
ACQUAINTANCE = ("acquaintance.person", "acquaintance.person")
COOPERATE = ("cooperate.party", "cooperate.party", "cooperate.project")


def eligible_pairs(works: dict[str, str], acquaint: list[tuple[str, str]]) -> set[frozenset]:
    """Company pairs linked by an acquaintance between their employees."""
    out = set()
    for p1, p2 in acquaint:
        c1, c2 = works[p1], works[p2]
        if c1 != c2:
            out.add(frozenset((c1, c2)))
    return out


def _side(cfg: SynthConfig, side: int, tag: str, rng: np.random.Generator):
    persons = [f"{tag}:person{i}" for i in range(cfg.persons[side])]
    companies = [f"{tag}:company{i}" for i in range(cfg.companies[side])]
    projects = [f"{tag}:project{i}" for i in range(cfg.projects[side])]
    positions = [f"{tag}:position{i}" for i in range(cfg.positions)]

    works = {p: companies[int(rng.integers(len(companies)))] for p in persons}
    base = [
        Record([(WORKS_AT[0], p), (WORKS_AT[1], c), (WORKS_AT[2], positions[int(rng.integers(len(positions)))])],
               [True, True, False])
        for p, c in works.items()
    ]
    acq: list[tuple[str, str]] = []
    seen = set()
    tries = 0
    while len(acq) < cfg.acquaintances[side] and tries < 100 * cfg.acquaintances[side]:
        tries += 1
        a, b = rng.choice(len(persons), size=2, replace=False)
        key = frozenset((int(a), int(b)))
        if key in seen or works[persons[a]] == works[persons[b]]:
            continue
        seen.add(key)
        acq.append((persons[a], persons[b]))
    base += [Record([(ACQUAINTANCE[0], a), (ACQUAINTANCE[1], b)], [True, True]) for a, b in acq]

    eligible = sorted(tuple(sorted(p)) for p in eligible_pairs(works, acq))
    if not eligible:
        raise GenerationError(f"{tag}: no company pair satisfies the rule; add acquaintances")
    elig_set = set(eligible)
    coop = []
    used = set()
    while len(coop) < cfg.cooperations[side]:
        if rng.random() < cfg.noise:
            a, b = rng.choice(len(companies), size=2, replace=False)
            pair = tuple(sorted((companies[a], companies[b])))
            if pair in elig_set:
                continue
        else:
            pair = eligible[int(rng.integers(len(eligible)))]
        j = projects[int(rng.integers(len(projects)))]
        key = (pair, j)
        if key in used:
            continue
        used.add(key)
        x, y = (pair[0], pair[1]) if rng.random() < 0.5 else (pair[1], pair[0])
        coop.append(Record([(COOPERATE[0], x), (COOPERATE[1], y), (COOPERATE[2], j)], [True, True, False]))
    return base, coop


def generate_synthetic(cfg: SynthConfig | None = None) -> DatasetBundle:
    """Planted-rule benchmark: companies cooperate when their employees know each other.

    The train side and the inference side use disjoint entity names.  The
    inference side's cooperate facts are split into inference/valid/test;
    valid and test facts ablate their second party slot (and the project
    slot with ``query_slots="cooperate"``).  Training facts mark the matching
    cooperate slots as queryable unless ``train_all_slots`` is set; the other
    facts still sit in the graph as context.
    """
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    tr_base, tr_coop = _side(cfg, 0, "tr", rng)
    inf_base, inf_coop = _side(cfg, 1, "inf", rng)
    order = rng.permutation(len(inf_coop))
    n = len(order)
    n_inf = int(round(cfg.split[0] * n))
    n_val = int(round(cfg.split[1] * n))
    pick = lambda ix: [inf_coop[i] for i in sorted(ix)]
    eval_slots = [1] if cfg.query_slots == "party" else [1, 2]
    valid = [Record(r.pairs, r.primary, eval_slots) for r in pick(order[n_inf:n_inf + n_val])]
    test = [Record(r.pairs, r.primary, eval_slots) for r in pick(order[n_inf + n_val:])]
    if not cfg.train_all_slots:
        train_slots = [0, 1] if cfg.query_slots == "party" else [0, 1, 2]
        tr_base = [Record(r.pairs, r.primary, []) for r in tr_base]
        tr_coop = [Record(r.pairs, r.primary, train_slots) for r in tr_coop]
    records = {
        "train": tr_base + tr_coop,
        "inference": inf_base + pick(order[:n_inf]),
        "valid": valid,
        "test": test,
    }
    return bundle_from_records(records)


def rule_satisfaction(records: list[Record], context: list[Record]) -> float:
    """Fraction of cooperate facts in ``records`` whose parties satisfy the rule in ``context``."""
    works = {}
    acq = []
    for r in context:
        roles = [p[0] for p in r.pairs]
        if tuple(roles) == WORKS_AT:
            works[r.pairs[0][1]] = r.pairs[1][1]
        elif tuple(roles) == ACQUAINTANCE:
            acq.append((r.pairs[0][1], r.pairs[1][1]))
    elig = eligible_pairs(works, acq)
    coop = [r for r in records if tuple(p[0] for p in r.pairs) == COOPERATE]
    if not coop:
        return math.nan
    return sum(frozenset((r.pairs[0][1], r.pairs[1][1])) in elig for r in coop) / len(coop)
