import os
import subprocess
import sys

import numpy as np
import pytest

from fairrec import _pykernels, kernels, model, train
from fairrec.graph import build_bipartite
from fairrec.synthetic import separable_dataset

from conftest import random_bipartite

compiled = pytest.mark.skipif("cython" not in kernels.available_backends(),
                              reason="compiled kernels not built")


def _case(seed, n_users=40, n_items=30, k=3, d=5):
    rng = np.random.default_rng(seed)
    pairs = random_bipartite(rng, n_users, n_items, 0.15)
    g = build_bipartite(pairs, n_users, n_items)
    n = g.n_nodes
    att = rng.random((n, k))
    x = rng.standard_normal((n, d))
    ev = rng.standard_normal((n, k, d))
    return g, att, x, ev, rng


def test_python_kernels_match_loops():
    g, att, x, ev, rng = _case(0, 8, 6)
    n, k, d = ev.shape
    got = _pykernels.gather_interests(g.indptr, g.indices, att, x)
    out, mid = _pykernels.select_aggregate(g.indptr, g.indices, g.weights, ev, x)
    dy = rng.standard_normal((n, d))
    back = _pykernels.scatter_selected(g.indptr, g.indices, g.rev, g.weights, mid, dy, k)
    expect_g, expect_o, expect_b = np.zeros((n, k, d)), np.zeros((n, d)), np.zeros((n, k, d))
    for v in range(n):
        for e in range(g.indptr[v], g.indptr[v + 1]):
            u = g.indices[e]
            expect_g[v] += att[u][:, None] * x[u]
            m = int(np.argmax([ev[u, j] @ x[v] for j in range(k)]))
            assert mid[e] == m
            expect_o[v] += g.weights[e] * ev[u, m]
            expect_b[u, m] += g.weights[e] * dy[v]
    np.testing.assert_allclose(got, expect_g, atol=1e-12)
    np.testing.assert_allclose(out, expect_o, atol=1e-12)
    np.testing.assert_allclose(back, expect_b, atol=1e-12)


@compiled
@pytest.mark.parametrize("seed", range(5))
def test_backends_agree(seed):
    g, att, x, ev, rng = _case(seed)
    from fairrec import _ckernels
    th = 2
    np.testing.assert_allclose(_ckernels.gather_interests(g.indptr, g.indices, att, x, th),
                               _pykernels.gather_interests(g.indptr, g.indices, att, x), atol=1e-12)
    np.testing.assert_allclose(_ckernels.neighbor_sum(g.indptr, g.indices, ev, th),
                               _pykernels.neighbor_sum(g.indptr, g.indices, ev), atol=1e-12)
    oc, mc = _ckernels.select_aggregate(g.indptr, g.indices, g.weights, ev, x, th)
    op, mp = _pykernels.select_aggregate(g.indptr, g.indices, g.weights, ev, x)
    np.testing.assert_array_equal(mc, mp)
    np.testing.assert_allclose(oc, op, atol=1e-12)
    dy = rng.standard_normal(x.shape)
    np.testing.assert_allclose(
        _ckernels.scatter_selected(g.indptr, g.indices, g.rev, g.weights, mc, dy, ev.shape[1], th),
        _pykernels.scatter_selected(g.indptr, g.indices, g.rev, g.weights, mp, dy, ev.shape[1]),
        atol=1e-12)


@compiled
def test_tied_dots_pick_first_interest_in_both_backends():
    g, att, x, ev, _ = _case(1)
    ev[:, 1] = ev[:, 0]
    from fairrec import _ckernels
    _, mc = _ckernels.select_aggregate(g.indptr, g.indices, g.weights, ev, x, 1)
    _, mp = _pykernels.select_aggregate(g.indptr, g.indices, g.weights, ev, x)
    np.testing.assert_array_equal(mc, mp)
    assert not np.any(mc == 1)


@compiled
def test_forward_and_gradients_agree_across_backends():
    s = separable_dataset(12, 20, 6)
    g = build_bipartite(s.train, s.n_users, s.n_items)
    p = model.init(g.n_nodes, 6, 3, 2, seed=0)
    batch = train.sample_triples(s.train, s.n_items, 32, np.random.default_rng(0))
    results = {}
    previous = kernels.BACKEND
    try:
        for name in ("cython", "python"):
            kernels.use_backend(name)
            state = model.forward(g, p)
            grads, loss = train.gradients(g, p, batch, 0.001, return_loss=True)
            results[name] = (state.final, grads.centers, grads.interests, loss)
    finally:
        kernels.use_backend(previous)
    for a, b in zip(results["cython"], results["python"]):
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")


def test_environment_forces_python_backend():
    env = dict(os.environ, FAIRREC_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from fairrec import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
