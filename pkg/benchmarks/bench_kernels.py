"""Time the compiled and pure-Python sampling kernels on a random hypergraph.

    python benchmarks/bench_kernels.py [--entities N] [--edges E] [--queries Q]

Both backends must return identical subgraphs for the same seed; the script
checks that before reporting timings.
"""

import argparse
import time

import numpy as np

from nshart import _pykernels
from nshart.hypergraph import Hyperedge, Query, build_hypergraph
from nshart.kernels import derive_seed
from nshart.sampler import fanout_schedule

try:
    from nshart import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def random_graph(n_ent, n_edges, n_rel, rng):
    facts = []
    for _ in range(n_edges):
        arity = int(rng.integers(2, 6))
        ents = rng.choice(n_ent, size=arity, replace=False)
        roles = rng.integers(0, n_rel, size=arity)
        facts.append(Hyperedge.of(list(zip(roles.tolist(), ents.tolist()))))
    return build_hypergraph(facts, n_ent, n_rel)


def run(impl, graph, seeds_list, per_hop, excludes):
    out = []
    for i, (seeds, ex) in enumerate(zip(seeds_list, excludes)):
        out.append(impl.expand(graph.ent_ptr, graph.ent_edges, graph.edge_ptr, graph.edge_members,
                               seeds, per_hop, derive_seed(7, i), ex))
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--entities", type=int, default=20000)
    ap.add_argument("--edges", type=int, default=60000)
    ap.add_argument("--queries", type=int, default=2000)
    ap.add_argument("--m", type=int, default=16)
    ap.add_argument("--K", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    graph = random_graph(args.entities, args.edges, 50, rng)
    per_hop = np.asarray(fanout_schedule(args.m, args.K).per_hop, dtype=np.int64)
    picks = rng.integers(0, graph.edge_count, size=args.queries)
    seeds_list, excludes = [], []
    for e in picks:
        q = Query.from_fact(graph.edges[int(e)], 0, source_edge=int(e))
        seeds_list.append(np.asarray(q.known_entities, dtype=np.int64))
        excludes.append(int(e))

    backends = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    results, times = {}, {}
    for name, impl in backends:
        best = float("inf")
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            results[name] = run(impl, graph, seeds_list, per_hop, excludes)
            best = min(best, time.perf_counter() - t0)
        times[name] = best

    if "cython" in results:
        for a, b in zip(results["python"], results["cython"]):
            assert all(np.array_equal(x, y) for x, y in zip(a[:3], b[:3])) and a[3] == b[3], "backends disagree"

    print(f"graph: {graph.entity_count} entities, {graph.edge_count} edges; "
          f"{args.queries} queries, fanout {per_hop.tolist()}")
    for name, t in times.items():
        print(f"{name:>7}: {t * 1e3:9.1f} ms  ({t / args.queries * 1e6:8.1f} us/query)")
    if "cython" in times:
        print(f"speedup: {times['python'] / times['cython']:.1f}x")
    else:
        print("compiled kernels not built; only the Python fallback was timed")


if __name__ == "__main__":
    main()
