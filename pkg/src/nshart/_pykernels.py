"""Pure-Python sampling kernels; the compiled ``_ckernels`` mirrors these exactly."""

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF


def splitmix64(state):
    """Advance a splitmix64 state; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def sample_indices(n, k, state):
    """Choose ``min(n, k)`` of ``range(n)`` without replacement.

    When ``n <= k`` every index is returned in order and the stream is not
    advanced.  Otherwise a partial Fisher-Yates shuffle draws ``k`` indices.
    """
    state = int(state)
    if n <= k:
        return np.arange(n, dtype=np.int64), state
    idx = list(range(n))
    for i in range(k):
        state, z = splitmix64(state)
        j = i + z % (n - i)
        idx[i], idx[j] = idx[j], idx[i]
    return np.asarray(idx[:k], dtype=np.int64), state


def expand(ent_ptr, ent_edges, edge_ptr, edge_members, seeds, fanouts, state, exclude):
    """Seeded frontier expansion over a CSR hypergraph.

    Hop ``k`` draws up to ``fanouts[k-1]`` incident edges for each entity
    first reached at hop ``k-1`` (the seeds are hop 0).  Returns the sampled
    edge ids in insertion order, the reached nodes with their hop distance,
    and the advanced RNG state.
    """
    state = int(state)
    exclude = int(exclude)
    dist = {}
    nodes = []
    for s in seeds:
        s = int(s)
        if s not in dist:
            dist[s] = 0
            nodes.append(s)
    chosen = set()
    edges = []
    frontier = list(nodes)
    for hop, fanout in enumerate(fanouts, start=1):
        fanout = int(fanout)
        nxt = []
        for u in frontier:
            cand = [int(e) for e in ent_edges[ent_ptr[u]:ent_ptr[u + 1]] if e != exclude]
            n = len(cand)
            if n > fanout:
                for i in range(fanout):
                    state, z = splitmix64(state)
                    j = i + z % (n - i)
                    cand[i], cand[j] = cand[j], cand[i]
                cand = cand[:fanout]
            for e in cand:
                if e in chosen:
                    continue
                chosen.add(e)
                edges.append(e)
                for w in edge_members[edge_ptr[e]:edge_ptr[e + 1]]:
                    w = int(w)
                    if w not in dist:
                        dist[w] = hop
                        nodes.append(w)
                        nxt.append(w)
        frontier = nxt
    return (
        np.asarray(edges, dtype=np.int64),
        np.asarray(nodes, dtype=np.int64),
        np.asarray([dist[v] for v in nodes], dtype=np.int64),
        state,
    )
