"""Reference numpy/scipy implementations of the propagation kernels.

All kernels operate on a CSR adjacency (``indptr``, ``indices``) over the
joint user+item node space. Entry ``e`` in row ``v`` is the directed edge
``v <- indices[e]``; ``weights[e]`` is the aggregation coefficient of that
edge and ``rev[e]`` the position of the opposite direction.
"""
import numpy as np
from scipy import sparse

_EDGE_CHUNK = 1 << 16


def _adjacency(indptr, indices, data=None):
    n = indptr.shape[0] - 1
    if data is None:
        data = np.ones(indices.shape[0])
    return sparse.csr_matrix((data, indices, indptr), shape=(n, n))


def gather_interests(indptr, indices, att, x):
    """out[v, k] = sum over neighbours n of att[n, k] * x[n]."""
    n, k = att.shape
    d = x.shape[1]
    weighted = (att[:, :, None] * x[:, None, :]).reshape(n, k * d)
    out = _adjacency(indptr, indices) @ weighted
    return np.ascontiguousarray(out).reshape(n, k, d)


def neighbor_sum(indptr, indices, t):
    """out[n, k] = sum over neighbours v of t[v, k]."""
    n, k, d = t.shape
    out = _adjacency(indptr, indices) @ t.reshape(n, k * d)
    return np.ascontiguousarray(out).reshape(n, k, d)


def select_aggregate(indptr, indices, weights, ev, x):
    """Matching-slide aggregation.

    For every directed edge ``v <- n`` pick ``mid = argmax_k <ev[n, k], x[v]>``
    (first index on ties) and accumulate ``weights[e] * ev[n, mid]`` into row v.
    Returns ``(out, mid)``.
    """
    n_nodes, k, d = ev.shape
    nnz = indices.shape[0]
    src = np.repeat(np.arange(n_nodes), np.diff(indptr))
    mid = np.empty(nnz, dtype=np.int64)
    selected = np.empty((nnz, d))
    step = max(1, _EDGE_CHUNK // max(k, 1))
    for lo in range(0, nnz, step):
        hi = min(nnz, lo + step)
        nb = ev[indices[lo:hi]]
        dots = np.einsum("ekd,ed->ek", nb, x[src[lo:hi]])
        m = np.argmax(dots, axis=1)
        mid[lo:hi] = m
        selected[lo:hi] = nb[np.arange(hi - lo), m]
    rows = sparse.csr_matrix(
        (weights, np.arange(nnz), indptr), shape=(n_nodes, nnz)
    )
    out = np.ascontiguousarray(rows @ selected)
    return out, mid


def scatter_selected(indptr, indices, rev, weights, mid, dy, k):
    """Adjoint of :func:`select_aggregate` w.r.t. ``ev`` with ``mid`` frozen."""
    n_nodes, d = dy.shape
    nnz = indices.shape[0]
    src = np.repeat(np.arange(n_nodes), np.diff(indptr))
    contrib = weights[:, None] * dy[src]
    target = indices * k + mid
    scatter = sparse.csr_matrix(
        (np.ones(nnz), (target, np.arange(nnz))), shape=(n_nodes * k, nnz)
    )
    out = np.ascontiguousarray(scatter @ contrib)
    return out.reshape(n_nodes, k, d)
