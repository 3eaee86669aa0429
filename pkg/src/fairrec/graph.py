"""Training bipartite graph and its propagation weights."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import EdgeCoverageError, NotAdjacentError, ParseError

log = logging.getLogger(__name__)

__all__ = [
    "BipartiteGraph",
    "build_bipartite",
    "norm_weight",
    "set_edge_weights",
    "load_edge_weights",
]


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    """Undirected user-item graph in CSR form over ``N = n_users + n_items`` nodes.

    Users occupy node ids ``0..n_users-1`` and item ``i`` is node
    ``n_users + i``. Neighbour lists are sorted. ``override`` optionally holds
    one aggregation coefficient per CSR entry; entry ``e`` of row ``v`` is the
    coefficient used when ``v`` aggregates from ``indices[e]``.
    """

    n_users: int
    n_items: int
    indptr: np.ndarray
    indices: np.ndarray
    override: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    @property
    def n_edges(self) -> int:
        """Number of undirected edges."""
        return int(self.indices.shape[0]) // 2

    def item_node(self, item):
        return self.n_users + item

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    @cached_property
    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    @cached_property
    def rows(self) -> np.ndarray:
        """Row (aggregating node) of every CSR entry."""
        return np.repeat(np.arange(self.n_nodes, dtype=np.int64), self.degree)

    @cached_property
    def rev(self) -> np.ndarray:
        """CSR position of the opposite direction of every entry."""
        # entries sorted by (col, row) enumerate the transpose in CSR order
        order = np.lexsort((self.rows, self.indices))
        rev = np.empty_like(order)
        rev[order] = np.arange(order.size)
        return rev

    @cached_property
    def default_weights(self) -> np.ndarray:
        deg = self.degree.astype(np.float64)
        return 1.0 / np.sqrt(deg[self.rows] * deg[self.indices])

    @property
    def weights(self) -> np.ndarray:
        return self.default_weights if self.override is None else self.override

    def position(self, v: int, vn: int) -> int:
        lo, hi = self.indptr[v], self.indptr[v + 1]
        pos = lo + int(np.searchsorted(self.indices[lo:hi], vn))
        if pos >= hi or self.indices[pos] != vn:
            raise NotAdjacentError(f"nodes {v} and {vn} are not adjacent")
        return pos

    def isolated_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.degree == 0)

    def edge_list(self):
        """Directed ``(v, v_n)`` pairs in CSR order."""
        return list(zip(self.rows.tolist(), self.indices.tolist()))


def build_bipartite(train, n_users: int, n_items: int) -> BipartiteGraph:
    """Build the symmetric bipartite graph from ``(user, item)`` pairs.

    Duplicate pairs collapse to one edge.
    """
    pairs = np.asarray(train, dtype=np.int64).reshape(-1, 2)
    if pairs.size == 0:
        raise ValueError("training interactions are empty")
    if pairs[:, 0].min() < 0 or pairs[:, 0].max() >= n_users:
        raise ValueError("user index out of range")
    if pairs[:, 1].min() < 0 or pairs[:, 1].max() >= n_items:
        raise ValueError("item index out of range")
    n = n_users + n_items
    u = pairs[:, 0]
    i = pairs[:, 1] + n_users
    src = np.concatenate([u, i])
    dst = np.concatenate([i, u])
    key = np.unique(src * n + dst)
    src, dst = key // n, key % n
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n), out=indptr[1:])
    g = BipartiteGraph(n_users, n_items, indptr, dst.astype(np.int64))
    isolated = g.isolated_nodes()
    if isolated.size:
        log.info("%d nodes have no training edges", isolated.size)
    return g


def norm_weight(g: BipartiteGraph, v: int, vn: int) -> float:
    """Aggregation coefficient for ``v`` pulling from neighbour ``vn``."""
    return float(g.weights[g.position(v, vn)])


def set_edge_weights(g: BipartiteGraph, weights) -> BipartiteGraph:
    """Return a copy of ``g`` using externally computed edge coefficients.

    ``weights`` maps every directed pair ``(v, v_n)`` of the graph to a real.
    Missing or extra pairs raise :class:`EdgeCoverageError`.
    """
    expected = g.edge_list()
    expected_set = set(expected)
    given = set(weights)
    missing = expected_set - given
    extra = given - expected_set
    if missing or extra:
        raise EdgeCoverageError(missing, extra)
    override = np.array([float(weights[e]) for e in expected], dtype=np.float64)
    if not np.all(np.isfinite(override)):
        raise ValueError("edge weights must be finite")
    return replace(g, override=override)


def load_edge_weights(path, g: BipartiteGraph, user_keys, item_keys, delimiter="\t") -> BipartiteGraph:
    """Apply an override file of ``user_key, item_key, w_forward, w_backward`` rows.

    ``w_forward`` is the coefficient when the user aggregates the item and
    ``w_backward`` the one when the item aggregates the user.
    """
    path = Path(path)
    uidx = {k: n for n, k in enumerate(user_keys)}
    iidx = {k: n for n, k in enumerate(item_keys)}
    weights = {}
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split(delimiter)
            if len(parts) != 4:
                raise ParseError(path, line_no, f"expected 4 columns, got {len(parts)}")
            try:
                u = uidx[parts[0]]
                i = iidx[parts[1]] + g.n_users
            except KeyError as exc:
                raise ParseError(path, line_no, f"unknown key {exc.args[0]!r}") from None
            try:
                weights[(u, i)] = float(parts[2])
                weights[(i, u)] = float(parts[3])
            except ValueError:
                raise ParseError(path, line_no, "weights must be numbers") from None
    return set_edge_weights(g, weights)
