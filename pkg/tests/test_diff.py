import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from nshart import diff
from nshart.diff import DTYPE, ConfigError, NumericError, ParamStore, ShapeError
from nshart.hypergraph import Hyperedge, Query, build_hypergraph
from nshart.model import NSHART, ModelConfig, SubgraphBatch
from nshart.sampler import fanout_schedule, sample_pair_subgraph, sample_query_subgraph
from nshart.training import GraphContext, FilterIndex, bce_loss, init_entity_embeddings, psr_node_embeddings

H = 1e-5
TOL = 1e-4


def numeric_grad(f, x: torch.Tensor, coords=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. the entries of leaf ``x`` (edited in place)."""
    flat = x.data.view(-1)
    coords = range(flat.numel()) if coords is None else coords
    out = np.zeros(flat.numel())
    with torch.no_grad():
        for i in coords:
            old = flat[i].item()
            flat[i] = old + H
            up = f().item()
            flat[i] = old - H
            down = f().item()
            flat[i] = old
            out[i] = (up - down) / (2 * H)
    return out


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    # Some gradients vanish exactly (attention key bias: softmax ignores a
    # per-row shift).  The floor turns those into an absolute check at 1e-9,
    # well above central-difference rounding noise (~1e-10).
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-5)
    return float(np.linalg.norm(a - b) / scale)


def check_grads(f, leaves: list[torch.Tensor]) -> float:
    """Assert every leaf's gradient matches central differences; returns the worst error."""
    for t in leaves:
        t.grad = None
    f().backward()
    worst = 0.0
    for t in leaves:
        analytic = t.grad.detach().numpy().reshape(-1).copy()
        numeric = numeric_grad(f, t)
        err = rel_error(analytic, numeric)
        assert err < TOL, f"relative gradient error {err:.2e} for shape {tuple(t.shape)}"
        worst = max(worst, err)
    return worst


def leaf(rng, *shape, scale=1.0):
    return torch.tensor(rng.normal(0, scale, size=shape), dtype=DTYPE, requires_grad=True)


def projector(rng, shape):
    w = torch.tensor(rng.normal(size=shape), dtype=DTYPE)
    return lambda y: (w * y).sum()


SEEDS = range(5)


# -- per-op gradient checks --------------------------------------------------------


def case_matmul(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 5)
    proj = projector(rng, (3, 5))
    return check_grads(lambda: proj(diff.matmul(a, b)), [a, b])


def case_softmax(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 4, 6, scale=2.0)
    proj = projector(rng, (4, 6))
    return check_grads(lambda: proj(diff.softmax(x)), [x])


def case_layer_norm(seed):
    rng = np.random.default_rng(seed)
    x, g, b = leaf(rng, 5, 6), leaf(rng, 6), leaf(rng, 6)
    proj = projector(rng, (5, 6))
    return check_grads(lambda: proj(diff.layer_norm(x, g, b)), [x, g, b])


def case_gelu_sigmoid(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 20, scale=3.0)
    proj = projector(rng, (20,))
    return max(check_grads(lambda: proj(diff.gelu(x)), [x]), check_grads(lambda: proj(diff.sigmoid(x)), [x]))


def case_dropout_fixed_mask(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 6, 5)
    proj = projector(rng, (6, 5))

    def f():
        return proj(diff.dropout(x, 0.3, True, torch.Generator().manual_seed(seed)))

    return check_grads(f, [x])


def case_attention_and_encoder(seed):
    rng = np.random.default_rng(seed)
    d, hidden = 8, 12
    p = diff.encoder_layer_params("enc", d, hidden, rng)
    for k in p:
        p[k] = (p[k] + torch.tensor(rng.normal(0, 0.1, size=tuple(p[k].shape)), dtype=DTYPE)).requires_grad_(True)
    tokens = leaf(rng, 3, 5, d)
    mask = torch.tensor(rng.random((3, 5)) < 0.8)
    mask[:, 0] = True
    proj = projector(rng, (3, 5, d))
    a = check_grads(lambda: proj(diff.transformer_encoder_layer(tokens, p, "enc", 2, key_mask=mask)[0]),
                    [tokens] + list(p.values()))
    proj_w = projector(rng, (3, 2, 5, 5))
    return max(a, check_grads(lambda: proj_w(diff.multi_head_attention(tokens, tokens, p, "enc", 2, mask)[1]),
                              [tokens]))


def case_bce(seed):
    rng = np.random.default_rng(seed)
    z = leaf(rng, 10)
    y = torch.tensor(rng.integers(0, 2, size=10), dtype=DTYPE)
    return max(check_grads(lambda: bce_loss(torch.sigmoid(z), y), [z]),
               check_grads(lambda: bce_loss(torch.sigmoid(z), y, logits=z), [z]))


# -- full forward on a 3-edge toy subgraph ------------------------------------------


def toy_graph():
    facts = [
        Hyperedge.of([(0, 0), (1, 1), (2, 2)], [True, True, False]),
        Hyperedge.of([(0, 1), (1, 3)]),
        Hyperedge.of([(0, 2), (1, 3), (2, 4)], [True, True, False]),
    ]
    return build_hypergraph(facts, 6, 3)


def toy_query():
    return Query.from_fact(Hyperedge.of([(0, 0), (1, 5), (2, 4)], [True, True, False]), 1)


def case_full_forward_tr(multiset):
    g = toy_graph()
    q = toy_query()
    sub = sample_query_subgraph(g, q, 2, fanout_schedule(4, 2), 0)
    assert len(sub.edges) == 3
    batch = SubgraphBatch.build(g, [sub])
    model = NSHART(ModelConfig(relation_count=3, d=8, layers=2, heads=2, hidden=12, dropout=0.0,
                               multiset=multiset), seed=1)
    ctx = GraphContext(g, FilterIndex())
    cand = torch.tensor([0, 1, 2, 3, 4])
    labels = torch.tensor([0.0, 0.0, 0.0, 1.0, 0.0], dtype=DTYPE)

    def f():
        x_all = init_entity_embeddings("TR-NEF", ctx, model)
        h, x, _ = model.forward(batch, x_all[torch.from_numpy(batch.node_entity)], np.random.default_rng(3))
        loc = {int(v): i for i, v in enumerate(batch.node_entity)}
        emb = torch.stack([x[loc[int(c)]] for c in cand])
        logits = NSHART.logits(h[int(batch.src_edge[0])], emb)
        return bce_loss(torch.sigmoid(logits), labels)

    return check_grads(f, [t for _, t in model.params])


def case_full_forward_psr():
    g = toy_graph()
    q = toy_query()
    sub = sample_pair_subgraph(g, q, 3, 2, fanout_schedule(4, 2), 0)
    batch = SubgraphBatch.build(g, [sub])
    model = NSHART(ModelConfig(relation_count=3, d=8, layers=2, heads=2, hidden=12, dropout=0.0, task="PSR"), seed=2)
    t = int(np.flatnonzero(batch.node_entity == 3)[0])

    def f():
        h, x, _ = model.forward(batch, psr_node_embeddings(model, batch.node_dist), np.random.default_rng(0))
        z = NSHART.logits(h[int(batch.src_edge[0])], x[t][None])
        return bce_loss(torch.sigmoid(z), torch.ones(1, dtype=DTYPE))

    return check_grads(f, [t_ for _, t_ in model.params])


OP_CASES = [case_matmul, case_softmax, case_layer_norm, case_gelu_sigmoid, case_dropout_fixed_mask,
            case_attention_and_encoder, case_bce]
MULTISETS = ["transformer", "sum", "attention", "setattention"]


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("case", OP_CASES, ids=lambda c: c.__name__[5:])
def test_op_gradients(case, seed):
    assert case(seed) < TOL


@pytest.mark.parametrize("multiset", MULTISETS)
def test_full_forward_gradients_tr(multiset):
    assert case_full_forward_tr(multiset) < TOL


def test_full_forward_gradients_psr():
    assert case_full_forward_psr() < TOL


# -- forward properties ----------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 1e4))
def test_softmax_rows(seed, scale):
    rng = np.random.default_rng(seed)
    x = torch.tensor(rng.normal(0, scale, size=(4, 7)), dtype=DTYPE)
    y = diff.softmax(x)
    assert torch.isfinite(y).all()
    assert torch.all(y >= 0) and torch.all(y <= 1)
    assert torch.max(torch.abs(y.sum(-1) - 1)).item() < 1e-12


def test_softmax_strictly_inside_unit_interval_on_moderate_inputs():
    x = torch.tensor(np.random.default_rng(0).normal(0, 3, size=(50, 6)), dtype=DTYPE)
    y = diff.softmax(x)
    assert torch.all(y > 0) and torch.all(y < 1)


def test_softmax_matches_reference():
    x = np.random.default_rng(1).normal(size=(3, 5))
    ref = np.exp(x - x.max(1, keepdims=True))
    ref /= ref.sum(1, keepdims=True)
    assert np.allclose(diff.softmax(torch.tensor(x)).numpy(), ref, rtol=0, atol=1e-15)


def test_layer_norm_reference_and_constant_rows():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 6))
    g, b = rng.normal(size=6), rng.normal(size=6)
    mu = x.mean(1, keepdims=True)
    var = ((x - mu) ** 2).mean(1, keepdims=True)
    ref = (x - mu) / np.sqrt(var + 1e-5) * g + b
    out = diff.layer_norm(torch.tensor(x), torch.tensor(g), torch.tensor(b)).numpy()
    assert np.allclose(out, ref, rtol=0, atol=1e-12)
    const = diff.layer_norm(torch.full((2, 6), 3.0, dtype=DTYPE), torch.tensor(g), torch.tensor(b))
    assert torch.allclose(const, torch.tensor(b).expand(2, 6))
    with pytest.raises(ShapeError):
        diff.layer_norm(torch.tensor(x), torch.tensor(g[:3]), torch.tensor(b))


def test_gelu_reference():
    x = np.linspace(-6, 6, 101)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    assert np.allclose(diff.gelu(torch.tensor(x)).numpy(), ref, rtol=0, atol=1e-14)


def test_dropout_modes():
    x = torch.ones(1000, dtype=DTYPE)
    assert diff.dropout(x, 0.5, False) is x
    y = diff.dropout(x, 0.5, True, torch.Generator().manual_seed(0))
    assert set(torch.unique(y).tolist()) <= {0.0, 2.0}
    z = diff.dropout(x, 0.5, True, torch.Generator().manual_seed(0))
    assert torch.equal(y, z)


def test_attention_masked_keys_get_zero_weight():
    rng = np.random.default_rng(0)
    p = diff.encoder_layer_params("a", 8, 8, rng)
    tok = torch.tensor(rng.normal(size=(2, 4, 8)), dtype=DTYPE)
    mask = torch.tensor([[True, True, False, False], [True, True, True, False]])
    _, w = diff.multi_head_attention(tok, tok, p, "a", 2, mask)
    assert torch.all(w[0, :, :, 2:] == 0) and torch.all(w[1, :, :, 3] == 0)
    assert torch.max(torch.abs(w.sum(-1) - 1)).item() < 1e-12


def test_encoder_cls_only_equals_full_row():
    rng = np.random.default_rng(4)
    p = diff.encoder_layer_params("e", 8, 16, rng)
    tok = torch.tensor(rng.normal(size=(3, 5, 8)), dtype=DTYPE)
    full, _ = diff.transformer_encoder_layer(tok, p, "e", 2)
    row, _ = diff.transformer_encoder_layer(tok, p, "e", 2, cls_only=True)
    assert torch.allclose(full[:, :1], row, rtol=0, atol=1e-13)


def test_forward_ops_deterministic():
    rng = np.random.default_rng(5)
    p = diff.encoder_layer_params("e", 8, 16, rng)
    tok = torch.tensor(rng.normal(size=(3, 5, 8)), dtype=DTYPE)
    a = diff.transformer_encoder_layer(tok, p, "e", 2, 0.2, True, None, torch.Generator().manual_seed(1))[0]
    b = diff.transformer_encoder_layer(tok, p, "e", 2, 0.2, True, None, torch.Generator().manual_seed(1))[0]
    assert torch.equal(a, b)


def test_check_finite():
    diff.check_finite(torch.ones(3, dtype=DTYPE))
    with pytest.raises(NumericError):
        diff.check_finite(torch.tensor([1.0, float("nan")], dtype=DTYPE))


def test_shape_and_config_errors():
    with pytest.raises(ShapeError):
        diff.matmul(torch.ones(2, 3, dtype=DTYPE), torch.ones(4, 2, dtype=DTYPE))
    with pytest.raises(ConfigError):
        diff.glorot_init((3,), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        diff.multi_head_attention(torch.ones(1, 2, 6, dtype=DTYPE), torch.ones(1, 2, 6, dtype=DTYPE), {}, "x", 4)
    with pytest.raises(ShapeError):
        diff.backward(torch.ones(2, dtype=DTYPE), ParamStore())


def test_glorot_bounds():
    t = diff.glorot_init((30, 50), np.random.default_rng(0))
    bound = math.sqrt(6 / 80)
    assert t.dtype == DTYPE and t.abs().max().item() <= bound


# -- parameters and checkpoints ----------------------------------------------------


def test_param_store_order_and_uniqueness():
    s = ParamStore()
    for name in ["b", "a", "c"]:
        s.add(name, torch.zeros(2, dtype=DTYPE))
    assert s.names() == ["b", "a", "c"]
    with pytest.raises(ConfigError):
        s.add("a", torch.zeros(1, dtype=DTYPE))


def test_backward_fills_unreachable_with_zeros():
    s = ParamStore()
    a = s.add("a", torch.ones(3, dtype=DTYPE))
    s.add("unused", torch.ones(2, dtype=DTYPE))
    grads = diff.backward((a * 2).sum(), s)
    assert torch.equal(grads["a"], torch.full((3,), 2.0, dtype=DTYPE))
    assert torch.equal(grads["unused"], torch.zeros(2, dtype=DTYPE))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    s = ParamStore()
    s.add("w", torch.tensor(rng.normal(size=(3, 4)), dtype=DTYPE))
    s.add("b", torch.tensor(rng.normal(size=4), dtype=DTYPE))
    path = tmp_path / "ck.bin"
    diff.save_checkpoint(path, s, {"k": 1})
    tensors, meta = diff.load_checkpoint(path)
    assert meta == {"k": 1} and list(tensors) == ["w", "b"]
    for name, t in s:
        assert np.array_equal(tensors[name], t.detach().numpy())
    assert path.read_bytes() == diff.checkpoint_bytes(s, {"k": 1})
    (tmp_path / "bad.bin").write_bytes(b"garbage!")
    with pytest.raises(ValueError):
        diff.load_checkpoint(tmp_path / "bad.bin")
