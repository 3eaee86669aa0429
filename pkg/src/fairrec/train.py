"""BPR training: triple sampling, loss, exact backward pass, Adam, early stopping."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import ConfigurationError, DivergenceError, NumericFault
from .graph import BipartiteGraph
from .model import LayerState, ModelParams, _cosine, _pair_terms, forward, score_items

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TripleBatch",
    "GradientSet",
    "AdamMoments",
    "EpochRecord",
    "FitResult",
    "sample_triples",
    "bpr_loss",
    "gradients",
    "check_gradient",
    "finite_diff_check",
    "adam_update",
    "adam_step",
    "validation_recall",
    "fit",
]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 2048
    l2_coeff: float = 0.001
    patience: int = 25
    max_epochs: int = 1000
    seed: int = 0
    eval_every: int = 1
    k_top: int = 20

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.batch_size < 1 or self.patience < 1 or self.eval_every < 1:
            raise ConfigurationError("batch_size, patience and eval_every must be >= 1")
        if self.l2_coeff < 0 or self.max_epochs < 0:
            raise ConfigurationError("l2_coeff and max_epochs must be >= 0")


@dataclass(frozen=True, eq=False)
class TripleBatch:
    """``(B, 3)`` array of ``(user, positive item, negative item)``."""

    triples: np.ndarray

    def __len__(self):
        return int(self.triples.shape[0])


@dataclass(eq=False)
class GradientSet:
    centers: np.ndarray
    interests: np.ndarray


@dataclass(eq=False)
class AdamMoments:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, p: ModelParams) -> "AdamMoments":
        return cls([np.zeros_like(a) for a in p.arrays()], [np.zeros_like(a) for a in p.arrays()], 0)


# --------------------------------------------------------------------------
# sampling


def _pair_codes(pairs, n_items):
    return np.sort(pairs[:, 0].astype(np.int64) * n_items + pairs[:, 1])


def sample_triples(train, n_items: int, batch_size: int, rng, _codes=None) -> TripleBatch:
    """Draw ``(u, i)`` uniformly from ``train`` and a uniform unobserved ``j``."""
    train = np.asarray(train, dtype=np.int64).reshape(-1, 2)
    codes = _pair_codes(train, n_items) if _codes is None else _codes
    counts = np.bincount(train[:, 0])
    full = np.flatnonzero(counts >= n_items)
    pool = train
    if full.size:
        log.warning("%d users interacted with every item and are skipped", full.size)
        pool = train[~np.isin(train[:, 0], full)]
    if pool.shape[0] == 0:
        raise ValueError("no user has an unobserved item to sample")
    picked = pool[rng.integers(pool.shape[0], size=batch_size)]
    u = picked[:, 0]
    j = rng.integers(n_items, size=batch_size)
    while True:
        probe = u * n_items + j
        pos = np.searchsorted(codes, probe)
        hit = (pos < codes.size) & (codes[np.minimum(pos, codes.size - 1)] == probe)
        if not hit.any():
            break
        j[hit] = rng.integers(n_items, size=int(hit.sum()))
    return TripleBatch(np.stack([u, picked[:, 1], j], axis=1))


# --------------------------------------------------------------------------
# loss and gradients


def _reg_nodes(triples, n_users):
    return np.unique(np.concatenate([triples[:, 0], n_users + triples[:, 1], n_users + triples[:, 2]]))


def _evaluate(g: BipartiteGraph, p: ModelParams, batch: TripleBatch, l2: float):
    """Loss, forward state, per-pair selections and score gaps for one batch."""
    state = forward(g, p)
    t = batch.triples
    ev, c = state.scoring_virtuals, state.final
    pos = _pair_terms(ev, c, t[:, 0], g.n_users + t[:, 1])
    neg = _pair_terms(ev, c, t[:, 0], g.n_users + t[:, 2])
    gap = (pos[0] + pos[1]) - (neg[0] + neg[1])
    loss = float(np.logaddexp(0.0, -gap).sum())
    nodes = _reg_nodes(t, g.n_users)
    reg = float((p.centers[nodes] ** 2).sum() + (p.interests ** 2).sum())
    return loss + l2 * reg, state, (pos, neg), gap


def _selection_signature(state: LayerState, selections) -> bytes:
    parts = [m.tobytes() for m in state.mids]
    for terms in selections:
        parts.append(terms[2].tobytes())
        parts.append(terms[3].tobytes())
    return b"".join(parts)


def bpr_loss(g: BipartiteGraph, p: ModelParams, batch: TripleBatch, l2: float) -> float:
    """Summed ``-log sigmoid(y_ui - y_uj)`` plus ``l2 * ||theta_batch||^2``.

    ``theta_batch`` is the layer-0 centers of the distinct batch nodes plus
    every interest vector.
    """
    return _evaluate(g, p, batch, l2)[0]


def gradients(g: BipartiteGraph, p: ModelParams, batch: TripleBatch, l2: float,
              return_loss: bool = False):
    """Reverse-mode gradient of :func:`bpr_loss`.

    The argmax choices (score maxima and matching slides) are held at their
    forward values; softmax and cosine are differentiated exactly.
    """
    loss, state, (pos, neg), gap = _evaluate(g, p, batch, l2)
    t = batch.triples
    n_nodes, dim = p.centers.shape
    ev, c = state.scoring_virtuals, state.final
    k_eff = ev.shape[1]

    # d loss / d gap, then merge identical (user, item) score terms
    coef = -expit(-gap)
    u = np.concatenate([t[:, 0], t[:, 0]])
    nodes = np.concatenate([g.n_users + t[:, 1], g.n_users + t[:, 2]])
    k1 = np.concatenate([pos[2], neg[2]])
    k2 = np.concatenate([pos[3], neg[3]])
    w = np.concatenate([coef, -coef])
    keys = np.stack([u, nodes, k1, k2], axis=1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    w = np.bincount(inverse.ravel(), weights=w, minlength=uniq.shape[0])
    u, nodes, k1, k2 = uniq.T

    d_ev = np.zeros((n_nodes, k_eff, dim))
    d_c = np.zeros((n_nodes, dim))
    np.add.at(d_ev, (u, k1), w[:, None] * c[nodes])
    np.add.at(d_c, nodes, w[:, None] * ev[u, k1])
    np.add.at(d_ev, (nodes, k2), w[:, None] * c[u])
    np.add.at(d_c, u, w[:, None] * ev[nodes, k2])

    d_w = np.zeros_like(p.interests)
    if p.single_interest:
        d_c += d_ev[:, 0, :]
    d_y = d_c
    weights = g.weights
    for layer in reversed(range(p.n_layers)):
        x = state.centers[layer]
        d_virtual = kernels.scatter_selected(
            g.indptr, g.indices, g.rev, weights, state.mids[layer], d_y, k_eff
        )
        if p.single_interest:
            d_y = d_virtual[:, 0, :]
            continue
        if layer == p.n_layers - 1:
            d_virtual += d_ev
        s = kernels.neighbor_sum(g.indptr, g.indices, d_virtual)
        att = state.attentions[layer]
        d_x = np.einsum("nk,nkd->nd", att, s)
        d_att = np.einsum("nkd,nd->nk", s, x)
        d_logit = att * (d_att - (att * d_att).sum(axis=1, keepdims=True))
        d_cos = d_logit / p.temperature
        wl = p.interests[layer]
        cos, nx, nw = _cosine(x, wl)
        inv_nx = np.divide(1.0, nx, out=np.zeros_like(nx), where=nx > 0)
        inv_nw = np.divide(1.0, nw, out=np.zeros_like(nw), where=nw > 0)
        d_cos = d_cos * ((nx > 0)[:, None] & (nw > 0)[None, :])
        dc_cos = d_cos * cos
        d_x += (d_cos * inv_nx[:, None]) @ (wl * inv_nw[:, None])
        d_x -= dc_cos.sum(axis=1)[:, None] * x * (inv_nx ** 2)[:, None]
        d_w[layer] = (d_cos * inv_nw[None, :]).T @ (x * inv_nx[:, None])
        d_w[layer] -= dc_cos.sum(axis=0)[:, None] * wl * (inv_nw ** 2)[:, None]
        d_y = d_x

    d_centers = d_y
    reg_nodes = _reg_nodes(t, g.n_users)
    d_centers[reg_nodes] += 2.0 * l2 * p.centers[reg_nodes]
    d_w += 2.0 * l2 * p.interests
    for name, arr in (("centers", d_centers), ("interests", d_w)):
        if not np.all(np.isfinite(arr)):
            raise NumericFault(f"non-finite gradient in {name}")
    grads = GradientSet(d_centers, d_w)
    return (grads, loss) if return_loss else grads


@dataclass
class GradCheck:
    max_rel_error: float
    checked: int
    skipped: int
    worst: tuple | None = None


def check_gradient(fn, x: np.ndarray, grad: np.ndarray, eps: float = 1e-4,
                   coords=None) -> GradCheck:
    """Compare ``grad`` with central differences of ``fn`` at ``x``.

    ``fn(x)`` returns the objective or ``(objective, signature)``; a coordinate
    whose signature differs between the two probes straddles a
    non-differentiable point and is skipped. ``x`` is perturbed in place and
    restored.
    """
    flat = x.reshape(-1)
    gflat = np.asarray(grad).reshape(-1)
    coords = range(flat.size) if coords is None else coords

    def call():
        out = fn(x)
        return out if isinstance(out, tuple) else (out, None)

    worst, worst_at, checked, skipped = 0.0, None, 0, 0
    for idx in coords:
        orig = flat[idx]
        flat[idx] = orig + eps
        f_plus, sig_plus = call()
        flat[idx] = orig - eps
        f_minus, sig_minus = call()
        flat[idx] = orig
        if sig_plus != sig_minus:
            skipped += 1
            continue
        numeric = (f_plus - f_minus) / (2.0 * eps)
        analytic = gflat[idx]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        checked += 1
        if err > worst:
            worst, worst_at = err, (int(idx), float(analytic), float(numeric))
    return GradCheck(worst, checked, skipped, worst_at)


def finite_diff_check(g: BipartiteGraph, p: ModelParams, batch: TripleBatch, eps: float = 1e-4,
                      l2: float = 0.0, n_coords: int | None = None, seed: int = 0) -> GradCheck:
    """Central-difference verification of :func:`gradients` on both parameter blocks."""
    grads = gradients(g, p, batch, l2)
    work = p.copy()
    rng = np.random.default_rng(seed)

    def fn(_):
        loss, state, selections, _ = _evaluate(g, work, batch, l2)
        return loss, _selection_signature(state, selections)

    results = []
    for arr, grad in ((work.centers, grads.centers), (work.interests, grads.interests)):
        if arr.size == 0:
            continue
        coords = None
        if n_coords is not None and n_coords < arr.size:
            coords = np.sort(rng.choice(arr.size, size=n_coords, replace=False)).tolist()
        results.append(check_gradient(fn, arr, grad, eps, coords))
    best = max(results, key=lambda r: r.max_rel_error)
    return GradCheck(
        best.max_rel_error,
        sum(r.checked for r in results),
        sum(r.skipped for r in results),
        best.worst,
    )


# --------------------------------------------------------------------------
# optimisation

_BETA1, _BETA2, _ADAM_EPS = 0.9, 0.999, 1e-8


def adam_update(theta, grad, m, v, t, lr):
    """One Adam step for a single array; returns ``(theta, m, v)``."""
    m = _BETA1 * m + (1.0 - _BETA1) * grad
    v = _BETA2 * v + (1.0 - _BETA2) * grad * grad
    m_hat = m / (1.0 - _BETA1 ** t)
    v_hat = v / (1.0 - _BETA2 ** t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + _ADAM_EPS), m, v


def adam_step(p: ModelParams, grads: GradientSet, moments: AdamMoments, config: TrainConfig):
    t = moments.t + 1
    new_arrays, new_m, new_v = [], [], []
    for theta, grad, m, v in zip(p.arrays(), (grads.centers, grads.interests), moments.m, moments.v):
        theta, m, v = adam_update(theta, grad, m, v, t, config.learning_rate)
        new_arrays.append(theta)
        new_m.append(m)
        new_v.append(v)
    params = ModelParams(new_arrays[0], new_arrays[1], p.temperature, p.single_interest)
    return params, AdamMoments(new_m, new_v, t)


# --------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_loss: float
    val_recall: float | None
    wall_seconds: float


@dataclass
class FitResult:
    params: ModelParams
    history: list = field(default_factory=list)
    best_epoch: int | None = None
    best_recall: float | None = None


def validation_recall(state: LayerState, known_by_user, target_by_user, k_top: int = 20) -> float:
    """Mean Recall@k over users with targets, ranking all items minus ``known``."""
    from .metrics import recall_at_k  # metrics depends on model, not on train

    users = [u for u, items in enumerate(target_by_user) if len(items)]
    if not users:
        return 0.0
    scores = score_items(state, users)
    total = 0.0
    for row, u in enumerate(users):
        s = scores[row]
        known = known_by_user[u]
        if len(known):
            s[known] = -np.inf
        top = np.argsort(-s, kind="stable")[:k_top]
        # -inf only wins if fewer than k_top candidates remain
        top = top[np.isfinite(s[top])]
        total += recall_at_k(top, target_by_user[u], k_top)
    return total / len(users)


def fit(g: BipartiteGraph, splits, p0: ModelParams, config: TrainConfig,
        on_epoch=None) -> FitResult:
    """Train with early stopping on validation Recall@k.

    Returns the parameters of the best validation epoch.
    """
    if config.max_epochs == 0:
        return FitResult(p0.copy())
    train = splits.train
    rng = np.random.default_rng(config.seed)
    codes = _pair_codes(train, splits.n_items)
    known = splits.items_by_user("train")
    targets = splits.items_by_user("validation")
    steps = max(1, -(-len(train) // config.batch_size))

    p = p0.copy()
    moments = AdamMoments.zeros_like(p)
    result = FitResult(p0.copy())
    best, since = -np.inf, 0
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        losses = []
        for _ in range(steps):
            batch = sample_triples(train, splits.n_items, config.batch_size, rng, codes)
            grads, loss = gradients(g, p, batch, config.l2_coeff, return_loss=True)
            if not np.isfinite(loss):
                raise DivergenceError(f"loss diverged at epoch {epoch}",
                                      last_good=result.params, history=result.history)
            p, moments = adam_step(p, grads, moments, config)
            losses.append(loss / len(batch))
        mean_loss = float(np.mean(losses))
        recall = None
        if epoch % config.eval_every == 0:
            recall = validation_recall(forward(g, p), known, targets, config.k_top)
            if recall > best:
                best, since = recall, 0
                result.params = p.copy()
                result.best_epoch, result.best_recall = epoch, recall
            else:
                since += config.eval_every
        record = EpochRecord(epoch, mean_loss, recall, time.perf_counter() - start)
        result.history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        log.debug("epoch %d loss %.5f recall %s", epoch, mean_loss, recall)
        if since >= config.patience:
            break
    if result.best_epoch is None:
        result.params = p.copy()
    return result
