"""Multi-interest graph propagation model.

Layer ``l`` (1-based) turns the centers ``E_C^{l-1}`` into virtual interest
embeddings ``E_V^l`` (attention-weighted neighbour sums, one slice per global
interest vector) and then aggregates, for every node, the best-matching
virtual slice of each neighbour into ``E_C^l``. Scores use the last layer.

Users and items share one node index space with users first.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import CompatibilityError, ConfigurationError, FormatError, NumericFault
from .graph import BipartiteGraph

log = logging.getLogger(__name__)

__all__ = [
    "ModelParams",
    "LayerState",
    "init",
    "attention",
    "virtual_embeddings",
    "matching_slide",
    "aggregate",
    "forward",
    "relevance",
    "score_items",
    "rank_items",
    "parameter_count",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(eq=False)
class ModelParams:
    """Learnable state: layer-0 centers ``(N, d)`` and global interests ``(L, K, d)``.

    In single-interest mode attention is bypassed, ``interests`` has shape
    ``(L, 0, d)`` and each layer is a plain normalized neighbour sum.
    """

    centers: np.ndarray
    interests: np.ndarray
    temperature: float = 2.0
    single_interest: bool = False

    def __post_init__(self):
        if self.centers.ndim != 2 or self.interests.ndim != 3:
            raise ConfigurationError("centers must be 2-D and interests 3-D")
        if self.interests.shape[2] != self.centers.shape[1]:
            raise ConfigurationError("interest vectors must match the embedding dimension")
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be positive")
        if self.single_interest != (self.interests.shape[1] == 0):
            raise ConfigurationError("single-interest models carry no interest vectors")

    @property
    def n_nodes(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def n_layers(self) -> int:
        return self.interests.shape[0]

    @property
    def n_interests(self) -> int:
        return 1 if self.single_interest else self.interests.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.centers.copy(), self.interests.copy(), self.temperature, self.single_interest
        )

    def arrays(self):
        return self.centers, self.interests


@dataclass(eq=False)
class LayerState:
    """Everything a forward pass produces.

    ``centers[l]`` is ``E_C^l`` for ``l = 0..L``; ``virtuals[l - 1]`` is
    ``E_V^l``, built from ``centers[l - 1]``. ``mids[l - 1]`` holds the
    matching slide of every CSR entry of layer ``l``.
    """

    n_users: int
    n_items: int
    centers: list
    virtuals: list
    attentions: list = field(default_factory=list)
    cosines: list = field(default_factory=list)
    mids: list = field(default_factory=list)
    single_interest: bool = False

    @property
    def final(self) -> np.ndarray:
        return self.centers[-1]

    @property
    def scoring_virtuals(self) -> np.ndarray:
        """``(N, K, d)`` interest slices used for scoring.

        Single-interest models score with their final centers.
        """
        if self.single_interest:
            return self.centers[-1][:, None, :]
        return self.virtuals[-1]


def init(n_nodes: int, dim: int, n_interests: int, n_layers: int, seed: int,
         temperature: float = 2.0, single_interest: bool = False) -> ModelParams:
    """Uniform ``[-1/sqrt(d), 1/sqrt(d)]`` initialisation, deterministic in ``seed``."""
    for name, value in (("n_nodes", n_nodes), ("dim", dim), ("n_interests", n_interests),
                        ("n_layers", n_layers)):
        if value < 1:
            raise ConfigurationError(f"{name} must be >= 1, got {value}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(dim)
    centers = rng.uniform(-bound, bound, size=(n_nodes, dim))
    k = 0 if single_interest else n_interests
    interests = rng.uniform(-bound, bound, size=(n_layers, k, dim))
    return ModelParams(centers, interests, float(temperature), single_interest)


def parameter_count(n_users: int, n_items: int, dim: int, n_interests: int,
                    n_layers: int, single_interest: bool = False) -> int:
    """Learnable scalars: one center per node plus ``L * K * d`` interest entries."""
    base = (n_users + n_items) * dim
    return base if single_interest else base + n_layers * n_interests * dim


# --------------------------------------------------------------------------
# layer pieces


def _cosine(x, w):
    """Cosine matrix ``(N, K)`` with cos := 0 whenever either vector is zero."""
    nx = np.linalg.norm(x, axis=1)
    nw = np.linalg.norm(w, axis=1)
    denom = np.outer(nx, nw)
    dots = x @ w.T
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    return cos, nx, nw


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def attention(centers: np.ndarray, interests: np.ndarray, temperature: float) -> np.ndarray:
    """Row-stochastic ``(N, K)`` softmax over cosine(center, interest) / T."""
    if not (np.all(np.isfinite(centers)) and np.all(np.isfinite(interests))):
        raise NumericFault("non-finite input to attention")
    cos, nx, nw = _cosine(centers, interests)
    if (nx == 0).any() or (nw == 0).any():
        log.debug("zero-norm vectors in attention; cosine taken as 0")
    att = _softmax(cos / temperature)
    if not np.all(np.isfinite(att)):
        raise NumericFault("non-finite attention weights")
    return att


def virtual_embeddings(g: BipartiteGraph, centers: np.ndarray, att: np.ndarray) -> np.ndarray:
    """``E_V[v, k] = sum_{n in N(v)} att[n, k] * E_C[n]``."""
    return kernels.gather_interests(g.indptr, g.indices, att, centers)


def matching_slide(virtual_node: np.ndarray, center: np.ndarray) -> int:
    """Index of the slice with the largest dot product with ``center``; first on ties."""
    return int(np.argmax(np.asarray(virtual_node) @ np.asarray(center)))


def aggregate(g: BipartiteGraph, centers: np.ndarray, virtual: np.ndarray,
              return_mids: bool = False):
    """Weighted sum over neighbours of each neighbour's matching virtual slice."""
    out, mids = kernels.select_aggregate(g.indptr, g.indices, g.weights, virtual, centers)
    return (out, mids) if return_mids else out


def forward(g: BipartiteGraph, p: ModelParams) -> LayerState:
    if g.n_nodes != p.n_nodes:
        raise CompatibilityError(f"graph has {g.n_nodes} nodes but parameters {p.n_nodes}")
    state = LayerState(g.n_users, g.n_items, [p.centers], [], single_interest=p.single_interest)
    x = p.centers
    zero_warned = False
    for layer in range(p.n_layers):
        if p.single_interest:
            ev = x[:, None, :]
            att = cos = None
        else:
            cos, nx, nw = _cosine(x, p.interests[layer])
            if not zero_warned and ((nx == 0).any() or (nw == 0).any()):
                log.debug("zero-norm vectors at layer %d; cosine taken as 0", layer + 1)
                zero_warned = True
            att = _softmax(cos / p.temperature)
            ev = kernels.gather_interests(g.indptr, g.indices, att, x)
        nxt, mid = kernels.select_aggregate(g.indptr, g.indices, g.weights, ev, x)
        if not (np.all(np.isfinite(nxt)) and np.all(np.isfinite(ev))):
            raise NumericFault(f"non-finite embeddings at layer {layer + 1}")
        state.attentions.append(att)
        state.cosines.append(cos)
        state.virtuals.append(ev if not p.single_interest else None)
        state.mids.append(mid)
        state.centers.append(nxt)
        x = nxt
    return state


# --------------------------------------------------------------------------
# scoring


def _pair_terms(ev, c, u_nodes, i_nodes):
    """Per-pair max dot products and their argmax slices for both score terms."""
    d1 = np.einsum("pkd,pd->pk", ev[u_nodes], c[i_nodes])
    d2 = np.einsum("pkd,pd->pk", ev[i_nodes], c[u_nodes])
    k1 = np.argmax(d1, axis=1)
    k2 = np.argmax(d2, axis=1)
    rows = np.arange(len(u_nodes))
    return d1[rows, k1], d2[rows, k2], k1, k2


def relevance(s: LayerState, u: int, i: int) -> float:
    """Symmetric max-over-interests score of user ``u`` and item ``i``."""
    ev, c = s.scoring_virtuals, s.final
    node = s.n_users + i
    return float(np.max(ev[u] @ c[node]) + np.max(ev[node] @ c[u]))


def pair_scores(s: LayerState, users, items) -> np.ndarray:
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    t1, t2, _, _ = _pair_terms(s.scoring_virtuals, s.final, users, s.n_users + items)
    return t1 + t2


def score_items(s: LayerState, users, chunk: int = 256) -> np.ndarray:
    """Dense ``(len(users), n_items)`` relevance matrix."""
    users = np.atleast_1d(np.asarray(users, dtype=np.int64))
    ev, c = s.scoring_virtuals, s.final
    item_c = c[s.n_users:]
    item_ev = ev[s.n_users:]
    k = ev.shape[1]
    out = np.empty((users.size, s.n_items))
    for lo in range(0, users.size, chunk):
        u = users[lo:lo + chunk]
        # (U*K, d) @ (d, I) -> (U, K, I)
        t1 = (ev[u].reshape(-1, ev.shape[2]) @ item_c.T).reshape(u.size, k, -1).max(axis=1)
        # (I*K, d) @ (d, U) -> (I, K, U)
        t2 = (item_ev.reshape(-1, ev.shape[2]) @ c[u].T).reshape(s.n_items, k, u.size).max(axis=1)
        out[lo:lo + chunk] = t1 + t2.T
    return out


def rank_scores(scores: np.ndarray, exclude, k_top: int) -> np.ndarray:
    """Indices of the top ``k_top`` non-excluded scores; ties by ascending index."""
    scores = np.array(scores, dtype=np.float64, copy=True)
    allowed = np.ones(scores.size, dtype=bool)
    if exclude is not None and len(exclude):
        allowed[np.asarray(list(exclude) if isinstance(exclude, (set, frozenset)) else exclude,
                           dtype=np.int64)] = False
    candidates = np.flatnonzero(allowed)
    order = np.argsort(-scores[candidates], kind="stable")
    return candidates[order[:k_top]]


def rank_items(s: LayerState, u: int, exclude=(), k_top: int = 20) -> list:
    scores = score_items(s, [u])[0]
    return rank_scores(scores, exclude, k_top).tolist()


# --------------------------------------------------------------------------
# checkpoints
#
# little-endian layout:
#   4s  magic b"FRCK"
#   u32 version, u32 N, u32 d, u32 K, u32 L, f64 T, u32 flags (bit 0: single-interest)
#   f32[N*d] centers, f32[L*K*d] interests (empty when single-interest), row-major
#   8s  blake2b-64 digest of every preceding byte

_CK_MAGIC = b"FRCK"
_CK_VERSION = 1
_CK_HEADER = struct.Struct("<4sIIIIIdI")


def _digest(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def checkpoint_bytes(p: ModelParams) -> bytes:
    payload = b"".join([
        _CK_HEADER.pack(_CK_MAGIC, _CK_VERSION, p.n_nodes, p.dim, p.n_interests,
                        p.n_layers, p.temperature, int(p.single_interest)),
        np.ascontiguousarray(p.centers, dtype="<f4").tobytes(),
        np.ascontiguousarray(p.interests, dtype="<f4").tobytes(),
    ])
    return payload + _digest(payload)


def save_checkpoint(path, p: ModelParams) -> None:
    Path(path).write_bytes(checkpoint_bytes(p))


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < _CK_HEADER.size + 8:
        raise FormatError(f"{path}: truncated checkpoint")
    payload, digest = raw[:-8], raw[-8:]
    if _digest(payload) != digest:
        raise FormatError(f"{path}: checkpoint checksum mismatch")
    magic, version, n, d, k, layers, temp, flags = _CK_HEADER.unpack_from(payload, 0)
    if magic != _CK_MAGIC or version != _CK_VERSION:
        raise FormatError(f"{path}: not a version-{_CK_VERSION} checkpoint")
    single = bool(flags & 1)
    k_stored = 0 if single else k
    off = _CK_HEADER.size
    expected = off + 4 * (n * d + layers * k_stored * d)
    if len(payload) != expected:
        raise FormatError(f"{path}: payload size {len(payload)} != {expected}")
    centers = np.frombuffer(payload, "<f4", n * d, off).reshape(n, d).astype(np.float64)
    off += 4 * n * d
    interests = np.frombuffer(payload, "<f4", layers * k_stored * d, off)
    interests = interests.reshape(layers, k_stored, d).astype(np.float64)
    return ModelParams(centers, interests, temp, single)
