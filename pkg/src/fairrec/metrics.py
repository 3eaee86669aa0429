"""Utility, fairness, alignment, diversity and correlation analytics."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .cohort import GroupPartition, category_diversity, embedding_diversity
from .errors import ConfigurationError, UndefinedCorrelationError, UndefinedDiversityError
from .model import LayerState, rank_scores, score_items

log = logging.getLogger(__name__)

__all__ = [
    "recall_at_k",
    "ndcg_at_k",
    "alignment",
    "pair_vectors",
    "group_alignment",
    "Rankings",
    "compute_rankings",
    "GroupReport",
    "group_eval",
    "unfairness",
    "recommendation_diversity",
    "matched_interest_stats",
    "correlation",
    "write_report",
    "write_group_curves",
]


def recall_at_k(ranked, relevant, k_top: int) -> float:
    relevant = set(np.asarray(relevant).tolist())
    if not relevant:
        raise ValueError("relevant set is empty")
    hits = sum(1 for item in list(ranked)[:k_top] if int(item) in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked, relevant, k_top: int) -> float:
    relevant = set(np.asarray(relevant).tolist())
    if not relevant:
        raise ValueError("relevant set is empty")
    dcg = sum(
        1.0 / math.log2(pos + 2)
        for pos, item in enumerate(list(ranked)[:k_top])
        if int(item) in relevant
    )
    idcg = sum(1.0 / math.log2(pos + 2) for pos in range(min(len(relevant), k_top)))
    return dcg / idcg


def _alignment_terms(user_vecs, item_vecs):
    u = np.asarray(user_vecs, dtype=np.float64)
    i = np.asarray(item_vecs, dtype=np.float64)
    nu = np.linalg.norm(u, axis=1)
    ni = np.linalg.norm(i, axis=1)
    valid = (nu > 0) & (ni > 0)
    uu = u[valid] / nu[valid, None]
    ii = i[valid] / ni[valid, None]
    return ((uu - ii) ** 2).sum(axis=1), valid


def alignment(user_vecs, item_vecs) -> float:
    """Mean squared distance between l2-normalised user and item vectors."""
    terms, valid = _alignment_terms(user_vecs, item_vecs)
    skipped = int((~valid).sum())
    if skipped:
        log.info("alignment skipped %d zero-norm pairs", skipped)
    if terms.size == 0:
        raise ValueError("no pair with non-zero vectors")
    return float(terms.mean())


def pair_vectors(state: LayerState, pairs):
    """User and item vectors of ``(user, item)`` pairs.

    The user side is the user's interest slice that scores the item highest,
    the item side the item's final center.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    ev, c = state.scoring_virtuals, state.final
    nodes = state.n_users + pairs[:, 1]
    dots = np.einsum("pkd,pd->pk", ev[pairs[:, 0]], c[nodes])
    best = np.argmax(dots, axis=1)
    return ev[pairs[:, 0], best], c[nodes]


def group_alignment(state: LayerState, part: GroupPartition, pairs) -> np.ndarray:
    """Alignment of each group's pairs; ``nan`` for groups without pairs."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    terms, valid = _alignment_terms(*pair_vectors(state, pairs))
    groups = part.group_of[pairs[valid, 0]]
    sums = np.bincount(groups, weights=terms, minlength=part.n_groups)
    counts = np.bincount(groups, minlength=part.n_groups)
    out = np.full(part.n_groups, np.nan)
    np.divide(sums, counts, out=out, where=counts > 0)
    if (counts == 0).any():
        log.warning("groups %s have no pairs for alignment", np.flatnonzero(counts == 0).tolist())
    return out


# --------------------------------------------------------------------------
# ranking-based utility


@dataclass(eq=False)
class Rankings:
    """Top-k lists and per-user utility; ``nan`` where a user has no targets."""

    top: list
    recall: np.ndarray
    ndcg: np.ndarray

    @property
    def evaluated(self) -> np.ndarray:
        return ~np.isnan(self.recall)


def compute_rankings(state: LayerState, splits, k_top: int = 20, part: str = "test",
                     chunk: int = 256) -> Rankings:
    """Full ranking of all items per user.

    Test ranking excludes train and validation items; validation ranking
    excludes train items only.
    """
    if part not in ("test", "validation"):
        raise ConfigurationError(f"cannot rank against {part!r}")
    known = splits.items_by_user("train")
    if part == "test":
        val = splits.items_by_user("validation")
        known = [np.concatenate([a, b]) for a, b in zip(known, val)]
    targets = splits.items_by_user(part)
    n_users = splits.n_users
    top = [None] * n_users
    recall = np.full(n_users, np.nan)
    ndcg = np.full(n_users, np.nan)
    users = np.arange(n_users)
    for lo in range(0, n_users, chunk):
        block = users[lo:lo + chunk]
        scores = score_items(state, block)
        for row, u in enumerate(block.tolist()):
            ranked = rank_scores(scores[row], known[u], k_top)
            top[u] = ranked
            if len(targets[u]):
                recall[u] = recall_at_k(ranked, targets[u], k_top)
                ndcg[u] = ndcg_at_k(ranked, targets[u], k_top)
    skipped = int(sum(1 for t in targets if len(t) == 0))
    if skipped:
        log.info("%d users have no %s items and are not evaluated", skipped, part)
    return Rankings(top, recall, ndcg)


def unfairness(group_means) -> float:
    """Population standard deviation of group means (empty groups ignored)."""
    values = np.asarray(group_means, dtype=np.float64)
    values = values[~np.isnan(values)]
    if values.size == 0:
        return 0.0
    return float(np.sqrt(np.mean((values - values.mean()) ** 2)))


def _group_means(values, part: GroupPartition):
    mask = ~np.isnan(values)
    groups = part.group_of[mask]
    counts = np.bincount(groups, minlength=part.n_groups)
    sums = np.bincount(groups, weights=values[mask], minlength=part.n_groups)
    means = np.full(part.n_groups, np.nan)
    np.divide(sums, counts, out=means, where=counts > 0)
    return means, counts


@dataclass(eq=False)
class GroupReport:
    k_top: int
    overall: dict
    per_group: list
    unfairness_cat: float | None
    unfairness_emb: float | None
    per_group_emb: list = field(default_factory=list)
    unevaluated_users: int = 0

    def to_dict(self) -> dict:
        k = self.k_top

        def rows(groups):
            return [
                {
                    "group_id": g["group_id"],
                    f"recall_at_{k}": g["recall"],
                    f"ndcg_at_{k}": g["ndcg"],
                    "alignment": g["alignment"],
                    "user_count": g["user_count"],
                }
                for g in groups
            ]

        return {
            f"recall_at_{k}": self.overall["recall"],
            f"ndcg_at_{k}": self.overall["ndcg"],
            "alignment": self.overall["alignment"],
            "user_count": self.overall["user_count"],
            "unfairness_cat": self.unfairness_cat,
            "unfairness_emb": self.unfairness_emb,
            "per_group": rows(self.per_group),
            "per_group_emb": rows(self.per_group_emb),
            "unevaluated_users": self.unevaluated_users,
        }


def _nan_to_none(x):
    x = float(x)
    return None if math.isnan(x) else x


def _group_rows(rankings: Rankings, part: GroupPartition, align):
    rec, counts = _group_means(rankings.recall, part)
    ndcg, _ = _group_means(rankings.ndcg, part)
    return [
        {
            "group_id": g,
            "recall": _nan_to_none(rec[g]),
            "ndcg": _nan_to_none(ndcg[g]),
            "alignment": _nan_to_none(align[g]) if align is not None else None,
            "user_count": int(counts[g]),
        }
        for g in range(part.n_groups)
    ], rec


def group_eval(state: LayerState, splits, partitions: dict, k_top: int = 20,
               rankings: Rankings | None = None) -> GroupReport:
    """Grouped Recall/NDCG@k, alignment and unfairness under each partition.

    ``partitions`` maps ``"cat"`` and/or ``"emb"`` to a :class:`GroupPartition`;
    the first present of the two drives ``per_group``.
    """
    if not partitions:
        raise ConfigurationError("at least one partition is required")
    if rankings is None:
        rankings = compute_rankings(state, splits, k_top)
    evaluated = rankings.evaluated
    train = splits.train
    overall_align = alignment(*pair_vectors(state, train)) if len(train) else float("nan")
    result = {}
    for name in ("cat", "emb"):
        part = partitions.get(name)
        if part is None:
            continue
        align = group_alignment(state, part, train)
        rows, means = _group_rows(rankings, part, align)
        result[name] = (rows, unfairness(means))
    primary = "cat" if "cat" in result else "emb"
    overall = {
        "recall": float(np.nanmean(rankings.recall)) if evaluated.any() else 0.0,
        "ndcg": float(np.nanmean(rankings.ndcg)) if evaluated.any() else 0.0,
        "alignment": _nan_to_none(overall_align),
        "user_count": int(evaluated.sum()),
    }
    return GroupReport(
        k_top=k_top,
        overall=overall,
        per_group=result[primary][0],
        unfairness_cat=result["cat"][1] if "cat" in result else None,
        unfairness_emb=result["emb"][1] if "emb" in result else None,
        per_group_emb=result["emb"][0] if "emb" in result else [],
        unevaluated_users=int((~evaluated).sum()),
    )


# --------------------------------------------------------------------------
# recommendation-side analytics


def recommendation_diversity(topk_lists, mode: str, category_of=None, item_embeddings=None) -> float:
    """Mean diversity of users' recommended lists (lists too short are skipped)."""
    values = []
    for items in topk_lists:
        if items is None or len(items) < 2:
            continue
        if mode == "category":
            if category_of is None:
                raise ConfigurationError("category diversity needs category data")
            values.append(category_diversity(items, category_of))
        elif mode == "embedding":
            if item_embeddings is None:
                raise ConfigurationError("embedding diversity needs item embeddings")
            values.append(embedding_diversity(items, item_embeddings))
        else:
            raise ConfigurationError(f"unknown diversity mode {mode!r}")
    if not values:
        raise UndefinedDiversityError("no recommendation list has two or more items")
    return float(np.mean(values))


def matched_interests(state: LayerState, user: int, items) -> np.ndarray:
    """Interest slice of ``user`` that best matches each item."""
    items = np.asarray(items, dtype=np.int64)
    ev, c = state.scoring_virtuals, state.final
    return np.argmax(ev[user] @ c[state.n_users + items].T, axis=0)


def matched_interest_stats(state: LayerState, topk_lists, part: GroupPartition) -> np.ndarray:
    """Per-group mean number of distinct interests matched by users' top-k lists."""
    counts = np.full(len(topk_lists), np.nan)
    for u, items in enumerate(topk_lists):
        if items is None or len(items) == 0:
            continue
        counts[u] = np.unique(matched_interests(state, u, items)).size
    means, _ = _group_means(counts, part)
    return means


# --------------------------------------------------------------------------
# correlation


def _average_ranks(x):
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    sorted_x = x[order]
    start = 0
    while start < x.size:
        stop = start
        while stop + 1 < x.size and sorted_x[stop + 1] == sorted_x[start]:
            stop += 1
        ranks[order[start:stop + 1]] = (start + stop) / 2.0 + 1.0
        start = stop + 1
    return ranks


def _pearson(a, b):
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt((da * da).sum()), np.sqrt((db * db).sum())
    if sa == 0 or sb == 0:
        raise UndefinedCorrelationError("correlation of a constant series is undefined")
    return float(np.clip((da * db).sum() / (sa * sb), -1.0, 1.0))


def correlation(a, b, method: str = "pearson") -> float:
    """Pearson, Spearman (average ranks) or Kendall tau-a."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("need two equal-length series of at least 2 values")
    if method == "pearson":
        return _pearson(a, b)
    if method == "spearman":
        return _pearson(_average_ranks(a), _average_ranks(b))
    if method == "kendall":
        n = a.size
        sa = np.sign(a[:, None] - a[None, :])
        sb = np.sign(b[:, None] - b[None, :])
        upper = np.triu_indices(n, 1)
        return float((sa * sb)[upper].sum() / (n * (n - 1) / 2))
    raise ConfigurationError(f"unknown correlation method {method!r}")


# --------------------------------------------------------------------------
# serialisation


def write_report(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def write_group_curves(path, curves: dict, delimiter="\t") -> None:
    """Write ``group_id, metric, value`` rows from ``{metric: per-group values}``."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(delimiter.join(["group_id", "metric", "value"]) + "\n")
        for metric in sorted(curves):
            for gid, value in enumerate(curves[metric]):
                text = "nan" if value is None or (isinstance(value, float) and math.isnan(value)) else repr(float(value))
                fh.write(delimiter.join([str(gid), metric, text]) + "\n")
