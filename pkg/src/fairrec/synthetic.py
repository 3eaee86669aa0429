"""Small synthetic corpora with known structure, used by tests and demos."""
from __future__ import annotations

import numpy as np

from .ingest import InteractionDataset, _canonical, split

__all__ = ["from_pairs", "separable_dataset", "block_dataset", "write_corpus"]


def from_pairs(pairs, n_users: int, n_items: int, category_of=None, rating: float = 5.0) -> InteractionDataset:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    u, i, r = _canonical(pairs[:, 0], pairs[:, 1], np.full(len(pairs), rating))
    cats, keys = None, ()
    if category_of is not None:
        cats = np.asarray(category_of, dtype=np.int64)
        keys = tuple(f"c{c}" for c in range(int(cats.max()) + 1))
    return InteractionDataset(
        u, i, r,
        tuple(f"u{n}" for n in range(n_users)),
        tuple(f"i{n}" for n in range(n_items)),
        cats, keys,
    )


def separable_dataset(n_users: int = 5, n_items: int = 10, per_user: int = 5, seed: int = 0):
    """Each user interacts with a contiguous window of items; returns a split."""
    pairs = [(u, (2 * u + k) % n_items) for u in range(n_users) for k in range(per_user)]
    return split(from_pairs(pairs, n_users, n_items), seed=seed)


def block_dataset(n_users: int = 200, n_items: int = 60, n_categories: int = 6,
                  narrow_fraction: float = 0.5, per_user: int = 10,
                  popularity_exponent: float = 1.0, seed: int = 0) -> InteractionDataset:
    """Two user populations over equally sized item categories.

    Narrow users draw every interaction from one category; broad users draw
    each interaction's category uniformly. Within a category, items are drawn
    without replacement with Zipf-like popularity weights.
    """
    rng = np.random.default_rng(seed)
    category_of = np.arange(n_items) % n_categories
    members = [np.flatnonzero(category_of == c) for c in range(n_categories)]
    weights = [1.0 / np.arange(1, m.size + 1) ** popularity_exponent for m in members]
    n_narrow = int(round(narrow_fraction * n_users))
    pairs = []
    for u in range(n_users):
        if u < n_narrow:
            home = int(rng.integers(n_categories))
            pool = members[home]
            pool_w = weights[home]
        else:
            pool = np.concatenate(members)
            # uniform over categories, popularity-weighted within each
            pool_w = np.concatenate([w / w.sum() for w in weights])
        take = min(per_user, pool.size)
        chosen = rng.choice(pool, size=take, replace=False, p=pool_w / pool_w.sum())
        pairs.extend((u, int(i)) for i in chosen)
    return from_pairs(pairs, n_users, n_items, category_of)


def write_corpus(ds: InteractionDataset, interactions_path, categories_path=None) -> None:
    """Write a dataset back to the delimited text formats read by ``load_interactions``."""
    with open(interactions_path, "w", encoding="utf-8") as fh:
        for u, i, r in ds.interactions():
            fh.write(f"{ds.user_keys[u]}\t{ds.item_keys[i]}\t{r:g}\n")
    if categories_path is not None and ds.category_of is not None:
        with open(categories_path, "w", encoding="utf-8") as fh:
            for i, c in enumerate(ds.category_of.tolist()):
                fh.write(f"{ds.item_keys[i]}\t{ds.category_keys[c]}\n")
