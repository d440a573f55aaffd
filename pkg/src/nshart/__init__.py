"""Inductive link prediction on n-ary facts with NS-HART message passing."""

from .hypergraph import Hyperedge, Query, RolePair, SemanticHypergraph, ValidationError, build_hypergraph
from .kernels import BACKEND as KERNEL_BACKEND
from .sampler import fanout_schedule, sample_pair_subgraph, sample_query_subgraph

__version__ = "0.1.0"
