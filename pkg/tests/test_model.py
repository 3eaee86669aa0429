import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fairrec import model
from fairrec.errors import CompatibilityError, ConfigurationError, FormatError, NumericFault
from fairrec.graph import build_bipartite, set_edge_weights

import oracles
from conftest import random_bipartite


def _graph(seed, n_users=6, n_items=8, density=0.35):
    rng = np.random.default_rng(seed)
    edges = random_bipartite(rng, n_users, n_items, density)
    return build_bipartite(edges, n_users, n_items), edges


# ---------------------------------------------------------------- init


def test_init_deterministic_and_bounded():
    a = model.init(50, 32, 4, 2, seed=7)
    b = model.init(50, 32, 4, 2, seed=7)
    assert np.array_equal(a.centers, b.centers) and np.array_equal(a.interests, b.interests)
    bound = 1 / math.sqrt(32)
    assert np.abs(a.centers).max() <= bound and np.abs(a.interests).max() <= bound
    assert a.interests.shape == (2, 4, 32)


def test_init_rejects_zero_dimension():
    with pytest.raises(ConfigurationError):
        model.init(10, 0, 2, 1, seed=0)


def test_parameter_count():
    assert model.parameter_count(6022, 1981, 32, 4, 2, single_interest=True) == 256096
    assert model.parameter_count(1, 1, 1, 1, 1) == 3
    assert model.parameter_count(10, 5, 32, 16, 3) - model.parameter_count(10, 5, 32, 16, 3, True) == 1536
    p = model.init(7, 3, 2, 2, seed=0)
    assert p.centers.size + p.interests.size == model.parameter_count(3, 4, 3, 2, 2)


# ---------------------------------------------------------------- attention


def test_attention_examples():
    w = np.array([[1.0, 0.0], [0.0, 1.0]])
    eq = model.attention(np.array([[1.0, 1.0]]), w, 2.0)
    np.testing.assert_allclose(eq, [[0.5, 0.5]], atol=1e-15)
    one = model.attention(np.random.default_rng(0).random((5, 3)), np.ones((1, 3)), 2.0)
    assert np.all(one == 1.0)
    cos10 = model.attention(np.array([[3.0, 0.0]]), w, 2.0)
    assert np.round(cos10, 4).tolist() == [[0.6225, 0.3775]]


def test_attention_zero_norm_is_uniform():
    att = model.attention(np.zeros((2, 3)), np.eye(3), 2.0)
    np.testing.assert_allclose(att, np.full((2, 3), 1 / 3))


def test_attention_large_temperature_is_uniform():
    rng = np.random.default_rng(3)
    att = model.attention(rng.standard_normal((30, 5)), rng.standard_normal((4, 5)), 1e6)
    assert np.abs(att - 0.25).max() < 1e-4


def test_attention_nan_is_a_numeric_fault():
    with pytest.raises(NumericFault):
        model.attention(np.array([[np.nan, 1.0]]), np.eye(2), 2.0)


# ---------------------------------------------------------------- virtuals


def test_virtual_single_neighbour():
    g = build_bipartite([(0, 0)], 1, 1)
    x = np.array([[1.0, 2.0], [3.0, -4.0]])
    ev = model.virtual_embeddings(g, x, np.ones((2, 1)))
    np.testing.assert_array_equal(ev[0, 0], x[1])
    np.testing.assert_array_equal(ev[1, 0], x[0])


def test_virtual_two_neighbours_by_hand():
    g = build_bipartite([(0, 0), (1, 0)], 2, 1)
    x = np.array([[3.0, 0.0], [0.0, 5.0], [1.0, 1.0]])
    w = np.array([[1.0, 0.0], [0.0, 1.0]])
    att = model.attention(x, w, 2.0)
    ev = model.virtual_embeddings(g, x, att)
    # item node 2 sees user 0 (cos (1, 0)) and user 1 (cos (0, 1))
    a = 1 / (1 + math.exp(-0.5))
    np.testing.assert_allclose(ev[2, 0], a * x[0] + (1 - a) * x[1], atol=1e-15)
    np.testing.assert_allclose(ev[2, 1], (1 - a) * x[0] + a * x[1], atol=1e-15)


def test_conservation_30_nodes():
    g, _ = _graph(4, 12, 18)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((30, 5))
    att = model.attention(x, rng.standard_normal((3, 5)), 2.0)
    ev = model.virtual_embeddings(g, x, att)
    dense = np.zeros((30, 30))
    dense[g.rows, g.indices] = 1
    np.testing.assert_allclose(ev.sum(axis=1), dense @ x, atol=1e-12)


# ---------------------------------------------------------------- matching slide


def test_matching_slide_examples():
    assert model.matching_slide(np.array([[0.3, -1.0]]), np.array([5.0, 1.0])) == 0
    assert model.matching_slide(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1.0, 0.2])) == 0
    assert model.matching_slide(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([1.0, 0.0])) == 0
    assert model.matching_slide(np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]]), np.array([1.0, 0.0])) == 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_matching_slide_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    ev, c = rng.standard_normal((4, 3)), rng.standard_normal(3)
    assert model.matching_slide(ev, c) == model.matching_slide(ev, scale * c)


# ---------------------------------------------------------------- aggregate


def test_aggregate_unit_edge():
    g = build_bipartite([(0, 0)], 1, 1)
    ev = np.array([[[1.0, 2.0]], [[7.0, -1.0]]])
    out = model.aggregate(g, np.ones((2, 2)), ev)
    np.testing.assert_array_equal(out[0], ev[1, 0])


def test_aggregate_degree_coefficient():
    g = build_bipartite([(u, 0) for u in range(4)], 4, 1)
    ev = np.zeros((5, 1, 2))
    ev[4, 0] = [2.0, -6.0]
    out = model.aggregate(g, np.ones((5, 2)), ev)
    np.testing.assert_allclose(out[0], [1.0, -3.0], atol=1e-15)


def test_aggregate_matches_double_loop():
    g, edges = _graph(11, 8, 12)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((20, 4))
    ev = rng.standard_normal((20, 3, 4))
    out, mids = model.aggregate(g, x, ev, return_mids=True)
    nb = oracles.neighbours(8, edges.tolist())
    deg = {v: len(s) for v, s in nb.items()}
    for v in range(20):
        acc = np.zeros(4)
        for n in nb[v]:
            k = int(np.argmax([ev[n, j] @ x[v] for j in range(3)]))
            acc += ev[n, k] / math.sqrt(deg[v] * deg[n])
        np.testing.assert_allclose(out[v], acc, atol=1e-12)


# ---------------------------------------------------------------- forward


def test_forward_l1_is_composition():
    g, _ = _graph(5)
    p = model.init(g.n_nodes, 4, 3, 1, seed=2)
    s = model.forward(g, p)
    att = model.attention(p.centers, p.interests[0], p.temperature)
    ev = model.virtual_embeddings(g, p.centers, att)
    out = model.aggregate(g, p.centers, ev)
    assert np.array_equal(s.centers[0], p.centers)
    assert np.array_equal(s.virtuals[0], ev) and np.array_equal(s.final, out)


def test_forward_bit_identical():
    g, _ = _graph(6)
    p = model.init(g.n_nodes, 4, 3, 2, seed=2)
    a, b = model.forward(g, p), model.forward(g, p)
    for x, y in zip(a.centers, b.centers):
        assert x.tobytes() == y.tobytes()


def test_forward_l2_path_graph_matches_reference():
    # 6-node path: u0 - i0 - u1 - i1 - u2 - i2
    edges = [(0, 0), (1, 0), (1, 1), (2, 1), (2, 2)]
    g = build_bipartite(edges, 3, 3)
    p = model.init(6, 3, 2, 2, seed=5)
    s = model.forward(g, p)
    centers, virtuals = oracles.ref_forward(6, 3, edges, p.centers.tolist(), p.interests.tolist(), 2.0)
    for layer in range(3):
        np.testing.assert_allclose(s.centers[layer], centers[layer], atol=1e-12)
    for layer in range(2):
        np.testing.assert_allclose(s.virtuals[layer], virtuals[layer], atol=1e-12)


def test_forward_k1_attention_is_one():
    g, _ = _graph(7)
    s = model.forward(g, model.init(g.n_nodes, 4, 1, 2, seed=0))
    assert all(np.all(a == 1.0) for a in s.attentions)


def test_forward_single_interest_is_normalized_propagation():
    g, _ = _graph(8)
    p = model.init(g.n_nodes, 4, 1, 2, seed=0, single_interest=True)
    s = model.forward(g, p)
    a = np.zeros((g.n_nodes, g.n_nodes))
    a[g.rows, g.indices] = g.weights
    np.testing.assert_allclose(s.final, a @ a @ p.centers, atol=1e-12)


def test_forward_with_override_matches_reference():
    edges = [(0, 0), (0, 1), (1, 1), (2, 0)]
    g = build_bipartite(edges, 3, 2)
    rng = np.random.default_rng(0)
    table = {e: float(rng.uniform(0.1, 1.0)) for e in g.edge_list()}
    h = set_edge_weights(g, table)
    p = model.init(5, 3, 2, 1, seed=1)
    centers, _ = oracles.ref_forward(5, 3, edges, p.centers.tolist(), p.interests.tolist(), 2.0,
                                     weight=lambda v, n: table[(v, n)])
    np.testing.assert_allclose(model.forward(h, p).final, centers[-1], atol=1e-12)


def test_forward_errors():
    g, _ = _graph(9)
    with pytest.raises(CompatibilityError):
        model.forward(g, model.init(g.n_nodes + 1, 3, 2, 1, seed=0))
    p = model.init(g.n_nodes, 3, 2, 1, seed=0)
    p.centers[0, 0] = np.inf
    with pytest.raises(NumericFault, match="layer"):
        model.forward(g, p)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 100), st.integers(2, 100),
       st.integers(1, 4), st.integers(1, 3))
def test_layer_invariants(seed, n_users, n_items, k, layers):
    rng = np.random.default_rng(seed)
    edges = random_bipartite(rng, n_users, n_items, density=min(1.0, 4.0 / n_items))
    g = build_bipartite(edges, n_users, n_items)
    p = model.init(g.n_nodes, 4, k, layers, seed=seed, temperature=float(rng.uniform(0.5, 4)))
    s = model.forward(g, p)
    for layer in range(layers):
        att = s.attentions[layer]
        assert np.all(att >= 0) and np.abs(att.sum(axis=1) - 1).max() <= 1e-9
        nsum = np.zeros_like(s.centers[layer])
        np.add.at(nsum, g.rows, s.centers[layer][g.indices])
        assert np.abs(s.virtuals[layer].sum(axis=1) - nsum).max() <= 1e-8


# ---------------------------------------------------------------- scoring


def test_relevance_k1_and_zero_items():
    g, _ = _graph(10)
    s = model.forward(g, model.init(g.n_nodes, 4, 1, 1, seed=3))
    ev, c = s.virtuals[-1], s.final
    u, i = 2, 3
    node = g.n_users + i
    assert model.relevance(s, u, i) == pytest.approx(ev[u, 0] @ c[node] + ev[node, 0] @ c[u], abs=1e-14)
    p = model.init(g.n_nodes, 4, 4, 1, seed=3)
    s = model.forward(g, p)
    s.centers[-1][g.n_users:] = 0.0
    t1 = np.max(s.virtuals[-1][u] @ s.final[node])
    assert t1 == 0.0


def test_relevance_bruteforce_k4():
    g, edges = _graph(12)
    p = model.init(g.n_nodes, 5, 4, 1, seed=8)
    s = model.forward(g, p)
    ev, c = s.virtuals[-1].tolist(), s.final.tolist()
    scores = model.score_items(s, np.arange(g.n_users))
    for u in range(g.n_users):
        for i in range(g.n_items):
            ref = oracles.ref_relevance(ev, c, u, g.n_users + i)
            assert model.relevance(s, u, i) == pytest.approx(ref, abs=1e-12)
            assert scores[u, i] == pytest.approx(ref, abs=1e-12)
    np.testing.assert_allclose(model.pair_scores(s, [0, 1], [2, 3]), scores[[0, 1], [2, 3]], atol=1e-12)


def test_rank_scores_examples():
    scores = np.array([0.9, 0.1, 0.5])
    assert model.rank_scores(scores, (), 2).tolist() == [0, 2]
    assert model.rank_scores(scores, {0}, 2).tolist() == [2, 1]
    assert model.rank_scores(np.array([0.3, 0.7, 0.3, 0.7]), (), 4).tolist() == [1, 3, 0, 2]
    assert model.rank_scores(scores, [0, 1, 2], 2).tolist() == []


def test_rank_items_excludes():
    g, _ = _graph(13)
    s = model.forward(g, model.init(g.n_nodes, 4, 2, 1, seed=0))
    full = model.rank_items(s, 0, (), g.n_items)
    assert sorted(full) == list(range(g.n_items))
    assert model.rank_items(s, 0, {full[0]}, 3) == full[1:4]


# ---------------------------------------------------------------- checkpoints


@pytest.mark.parametrize("single", [False, True])
def test_checkpoint_roundtrip(tmp_path, single):
    p = model.init(9, 4, 3, 2, seed=1, temperature=1.5, single_interest=single)
    path = tmp_path / "m.ckpt"
    model.save_checkpoint(path, p)
    q = model.load_checkpoint(path)
    assert q.single_interest == single and q.temperature == 1.5
    np.testing.assert_array_equal(q.centers, p.centers.astype(np.float32))
    np.testing.assert_array_equal(q.interests, p.interests.astype(np.float32))
    raw = bytearray(path.read_bytes())
    assert raw[:4] == b"FRCK"
    raw[40] ^= 1
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        model.load_checkpoint(path)
