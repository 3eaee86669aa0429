"""Per-user interest diversity and diversity-based user grouping."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InfeasibleClusteringError, UndefinedDiversityError

log = logging.getLogger(__name__)

__all__ = [
    "DiversityScores",
    "GroupPartition",
    "KMeansResult",
    "category_diversity",
    "embedding_diversity",
    "interest_diversity",
    "diversity_scores",
    "kmeans",
    "wcss_curve",
    "elbow",
    "partition",
    "write_partition",
]

STRATEGIES = ("kmeans", "equal_count", "equal_range")


def category_diversity(items, category_of) -> float:
    """Simpson's index of diversity over the categories of ``items``."""
    items = np.asarray(items, dtype=np.int64)
    m = items.size
    if m < 2:
        raise UndefinedDiversityError(f"need at least 2 interactions, got {m}")
    counts = np.bincount(np.asarray(category_of)[items]).astype(np.int64)
    same = int((counts * (counts - 1)).sum())
    total = m * (m - 1)
    # integer numerator keeps this a single correctly rounded division
    return (total - same) / total


def embedding_diversity(items, embeddings) -> float:
    """One minus the mean pairwise cosine over distinct item pairs, clamped to [0, 1]."""
    items = np.asarray(items, dtype=np.int64)
    m = items.size
    if m < 2:
        raise UndefinedDiversityError(f"need at least 2 interactions, got {m}")
    e = np.asarray(embeddings, dtype=np.float64)[items]
    norms = np.linalg.norm(e, axis=1)
    unit = np.divide(e, norms[:, None], out=np.zeros_like(e), where=norms[:, None] > 0)
    s = unit.sum(axis=0)
    # sum over i != i' of cos = |sum of unit vectors|^2 - sum of self terms
    off_diag = s @ s - (unit * unit).sum()
    value = 1.0 - off_diag / (m * (m - 1))
    return float(min(1.0, max(0.0, value)))


def interest_diversity(items, mode: str, category_of=None, item_embeddings=None) -> float:
    if mode == "category":
        if category_of is None:
            raise ConfigurationError("category diversity needs category data")
        return category_diversity(items, category_of)
    if mode == "embedding":
        if item_embeddings is None:
            raise ConfigurationError("embedding diversity needs item embeddings")
        return embedding_diversity(items, item_embeddings)
    raise ConfigurationError(f"unknown diversity mode {mode!r}")


@dataclass(frozen=True, eq=False)
class DiversityScores:
    """Diversity per user; ``nan`` where fewer than two interactions exist."""

    mode: str
    scores: np.ndarray

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.scores)

    def score_of(self, user: int) -> float:
        return float(self.scores[user])


def diversity_scores(items_by_user, mode: str, category_of=None, item_embeddings=None) -> DiversityScores:
    out = np.full(len(items_by_user), np.nan)
    undefined = 0
    for u, items in enumerate(items_by_user):
        if len(items) < 2:
            undefined += 1
            continue
        out[u] = interest_diversity(items, mode, category_of, item_embeddings)
    if undefined:
        log.warning("%d users have fewer than 2 interactions; diversity undefined", undefined)
    return DiversityScores(mode, out)


# --------------------------------------------------------------------------
# 1-D k-means


@dataclass(frozen=True, eq=False)
class KMeansResult:
    """Cluster labels ordered so that centers ascend."""

    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    n_iter: int


def _plus_plus(x, k, rng):
    centers = [x[rng.integers(x.size)]]
    for _ in range(1, k):
        d2 = np.min((x[:, None] - np.asarray(centers)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0:
            break
        centers.append(x[rng.choice(x.size, p=d2 / total)])
    return np.asarray(centers, dtype=np.float64)


def _lloyd(x, centers, max_iter, tol):
    k = centers.size
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        labels = np.argmin((x[:, None] - centers[None, :]) ** 2, axis=1)
        new = centers.copy()
        for c in range(k):
            members = x[labels == c]
            if members.size:
                new[c] = members.mean()
            else:
                # reseed an empty cluster at the worst-served point
                d2 = (x - centers[labels]) ** 2
                new[c] = x[np.argmax(d2)]
        shift = np.max(np.abs(new - centers))
        centers = new
        if shift <= tol:
            break
    labels = np.argmin((x[:, None] - centers[None, :]) ** 2, axis=1)
    for c in range(k):
        if np.any(labels == c):
            centers[c] = x[labels == c].mean()
    inertia = float(((x - centers[labels]) ** 2).sum())
    return labels, centers, inertia, n_iter


def kmeans(scores, n_clusters: int, seed: int = 0, n_init: int = 10,
           max_iter: int = 300, tol: float = 1e-6) -> KMeansResult:
    """1-D k-means with k-means++ seeding, best of ``n_init`` restarts."""
    x = np.asarray(scores, dtype=np.float64).ravel()
    distinct = np.unique(x).size
    if n_clusters < 1 or n_clusters > distinct:
        raise InfeasibleClusteringError(
            f"cannot form {n_clusters} clusters from {distinct} distinct values"
        )
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers = _plus_plus(x, n_clusters, rng)
        if centers.size < n_clusters:
            continue
        labels, centers, inertia, n_iter = _lloyd(x, centers, max_iter, tol)
        if best is None or inertia < best[2]:
            best = (labels, centers, inertia, n_iter)
    labels, centers, inertia, n_iter = best
    order = np.argsort(centers, kind="stable")
    relabel = np.empty_like(order)
    relabel[order] = np.arange(order.size)
    return KMeansResult(relabel[labels], centers[order], inertia, n_iter)


def wcss_curve(scores, g_max: int = 10, seed: int = 0) -> np.ndarray:
    """Within-cluster sum of squares for ``G = 1..g_max`` (index 0 is G=1)."""
    return np.array([kmeans(scores, g, seed).inertia for g in range(1, g_max + 1)])


# a log-scale bend must at least halve the relative drop rate
_LOG_BEND = float(np.log(2.0))


def elbow(scores, g_max: int = 10, seed: int = 0, criterion: str = "log") -> int:
    """Cluster count at the sharpest bend of the WCSS curve.

    ``criterion="raw"`` maximises the second difference
    ``WCSS(G-1) - 2 WCSS(G) + WCSS(G+1)``. Absolute drops are dominated by
    the first split, so on evenly spaced clusters this rule settles on G=2.
    ``criterion="log"`` (default) takes the same second difference of log
    WCSS, comparing relative drops. A log bend is accepted only when the
    relative drop into G is at least twice the drop out of it; smooth curves
    without such a bend fall back to the raw rule.
    """
    if g_max < 3:
        raise ConfigurationError("elbow needs g_max >= 3")
    if criterion not in ("log", "raw"):
        raise ConfigurationError(f"unknown elbow criterion {criterion!r}")
    distinct = np.unique(np.asarray(scores, dtype=np.float64)).size
    if distinct < 3:
        return distinct
    g_max = min(g_max, distinct)
    curve = wcss_curve(scores, g_max, seed)
    # second difference at G uses curve[G-2], curve[G-1], curve[G]
    raw = curve[:-2] - 2.0 * curve[1:-1] + curve[2:]
    if criterion == "log":
        # the floor keeps an exact zero WCSS (G = distinct values) finite
        logc = np.log(np.maximum(curve, 1e-12 * max(curve[0], 1e-300)))
        bend = logc[:-2] - 2.0 * logc[1:-1] + logc[2:]
        if bend.max() >= _LOG_BEND:
            return int(np.argmax(bend)) + 2
    return int(np.argmax(raw)) + 2


# --------------------------------------------------------------------------
# partitions


@dataclass(frozen=True, eq=False)
class GroupPartition:
    """User -> group assignment; group ids ascend with mean diversity.

    Users with undefined diversity are placed in group 0.
    """

    group_of: np.ndarray
    n_groups: int
    strategy: str
    scores: np.ndarray
    empty_groups: tuple = ()
    boundaries: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def members(self, group: int) -> np.ndarray:
        return np.flatnonzero(self.group_of == group)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.group_of, minlength=self.n_groups)


def partition(scores, strategy: str = "kmeans", n_groups="auto", seed: int = 0,
              g_max: int = 10) -> GroupPartition:
    """Group users by diversity.

    ``kmeans`` clusters the scores (``n_groups="auto"`` picks G by the elbow
    rule); ``equal_count`` cuts the sorted scores into blocks whose sizes
    differ by at most one; ``equal_range`` splits ``[min, max]`` into equal
    width intervals.
    """
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown partition strategy {strategy!r}")
    values = scores.scores if isinstance(scores, DiversityScores) else np.asarray(scores, dtype=np.float64)
    defined = np.flatnonzero(~np.isnan(values))
    x = values[defined]
    if x.size == 0:
        raise ConfigurationError("no user has a defined diversity score")
    if n_groups == "auto":
        if strategy != "kmeans":
            raise ConfigurationError(f"{strategy} needs an explicit group count")
        n_groups = elbow(x, g_max, seed)
    n_groups = int(n_groups)
    if n_groups < 1:
        raise ConfigurationError("group count must be >= 1")
    boundaries = np.zeros(0)
    if strategy == "kmeans":
        labels = kmeans(x, n_groups, seed).labels
    elif strategy == "equal_count":
        order = np.argsort(x, kind="stable")
        labels = np.empty(x.size, dtype=np.int64)
        for gid, block in enumerate(np.array_split(order, n_groups)):
            labels[block] = gid
    else:
        lo, hi = float(x.min()), float(x.max())
        boundaries = lo + (hi - lo) * np.arange(1, n_groups) / n_groups
        labels = np.searchsorted(boundaries, x, side="right")
    group_of = np.zeros(values.size, dtype=np.int64)
    group_of[defined] = labels
    sizes = np.bincount(labels, minlength=n_groups)
    empty = tuple(int(gid) for gid in np.flatnonzero(sizes == 0))
    if empty:
        log.warning("partition has empty groups %s", empty)
    return GroupPartition(group_of, n_groups, strategy, values, empty, boundaries)


def write_partition(path, part: GroupPartition, user_keys, delimiter="\t") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(delimiter.join(["user_key", "diversity_score", "group_id", "strategy"]) + "\n")
        for u, key in enumerate(user_keys):
            score = part.scores[u]
            text = "nan" if np.isnan(score) else repr(float(score))
            fh.write(delimiter.join([key, text, str(int(part.group_of[u])), part.strategy]) + "\n")
