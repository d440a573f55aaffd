import numpy as np
import pytest
import torch

from nshart.hypergraph import Hyperedge, build_hypergraph

torch.set_num_threads(1)


def random_facts(rng: np.random.Generator, n_ent: int, n_rel: int, n_edges: int, max_arity: int = 4,
                 multi_role: bool = True):
    """Random facts; arity 2..max_arity, entities may repeat inside a fact when multi_role."""
    facts = []
    for _ in range(n_edges):
        n = int(rng.integers(2, max_arity + 1))
        ents = rng.choice(n_ent, size=n, replace=False)
        roles = rng.integers(0, n_rel, size=n)
        if multi_role and rng.random() < 0.1:
            ents[-1] = ents[0]  # same entity in two roles
            roles[-1] = (roles[0] + 1) % n_rel
        primary = [True, True] + [bool(rng.random() < 0.5) for _ in range(n - 2)]
        facts.append(Hyperedge.of(zip(roles.tolist(), ents.tolist()), primary))
    return facts


def random_graph(seed: int, n_ent: int = 30, n_rel: int = 6, n_edges: int = 40, max_arity: int = 4):
    rng = np.random.default_rng(seed)
    return build_hypergraph(random_facts(rng, n_ent, n_rel, n_edges, max_arity), n_ent, n_rel)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> "[PASS]/[FAIL] criterion N: ..." line, filled by test_acceptance
RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
