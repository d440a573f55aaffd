# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled sampling kernels.  Output must match ``_pykernels`` bit for bit."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()


cdef inline uint64_t _next(uint64_t* state) nogil:
    cdef uint64_t z
    state[0] = state[0] + <uint64_t>0x9E3779B97F4A7C15ULL
    z = state[0]
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EBULL
    return z ^ (z >> 31)


def splitmix64(state):
    cdef uint64_t s = <uint64_t>int(state)
    cdef uint64_t z = _next(&s)
    return int(s), int(z)


def sample_indices(Py_ssize_t n, Py_ssize_t k, state):
    cdef uint64_t s = <uint64_t>int(state)
    cdef Py_ssize_t i, j
    cdef int64_t tmp
    if n <= k:
        return np.arange(n, dtype=np.int64), int(s)
    cdef cnp.ndarray[int64_t, ndim=1] idx = np.arange(n, dtype=np.int64)
    for i in range(k):
        j = i + <Py_ssize_t>(_next(&s) % <uint64_t>(n - i))
        tmp = idx[i]
        idx[i] = idx[j]
        idx[j] = tmp
    return idx[:k].copy(), int(s)


def expand(const int64_t[:] ent_ptr, const int64_t[:] ent_edges,
           const int64_t[:] edge_ptr, const int64_t[:] edge_members,
           seeds, fanouts, state, long long exclude):
    cdef uint64_t s = <uint64_t>int(state)
    cdef Py_ssize_t n_ent = ent_ptr.shape[0] - 1
    cdef Py_ssize_t n_edge = edge_ptr.shape[0] - 1
    cdef cnp.ndarray[int64_t, ndim=1] dist = np.full(n_ent, -1, dtype=np.int64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] chosen = np.zeros(n_edge, dtype=np.uint8)
    cdef list nodes = []
    cdef list edges = []
    cdef list frontier = []
    cdef list nxt
    cdef int64_t u, w, e, tmp
    cdef Py_ssize_t i, j, n, hop, fanout, a, c
    cdef int64_t[:] cand
    cdef cnp.ndarray[int64_t, ndim=1] buf = np.empty(max(1, ent_edges.shape[0]), dtype=np.int64)
    cand = buf

    for x in seeds:
        u = <int64_t>x
        if dist[u] < 0:
            dist[u] = 0
            nodes.append(u)
            frontier.append(u)

    hop = 0
    for f in fanouts:
        hop += 1
        fanout = <Py_ssize_t>f
        nxt = []
        for x in frontier:
            u = <int64_t>x
            n = 0
            for a in range(ent_ptr[u], ent_ptr[u + 1]):
                e = ent_edges[a]
                if e != exclude:
                    cand[n] = e
                    n += 1
            if n > fanout:
                for i in range(fanout):
                    j = i + <Py_ssize_t>(_next(&s) % <uint64_t>(n - i))
                    tmp = cand[i]
                    cand[i] = cand[j]
                    cand[j] = tmp
                n = fanout
            for i in range(n):
                e = cand[i]
                if chosen[e]:
                    continue
                chosen[e] = 1
                edges.append(e)
                for c in range(edge_ptr[e], edge_ptr[e + 1]):
                    w = edge_members[c]
                    if dist[w] < 0:
                        dist[w] = hop
                        nodes.append(w)
                        nxt.append(w)
        frontier = nxt

    node_arr = np.asarray(nodes, dtype=np.int64)
    return (
        np.asarray(edges, dtype=np.int64),
        node_arr,
        dist[node_arr] if len(nodes) else np.zeros(0, dtype=np.int64),
        int(s),
    )

