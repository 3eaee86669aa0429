"""Loading, filtering, splitting and subsampling of interaction corpora."""
from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigurationError,
    EmptyCorpusError,
    FormatError,
    ParseError,
    SplitInfeasibleError,
)

log = logging.getLogger(__name__)

__all__ = [
    "InteractionDataset",
    "SplitDataset",
    "load_interactions",
    "load_categories",
    "attach_categories",
    "preprocess",
    "split",
    "sample_items",
    "save_bundle",
    "load_bundle",
    "dataset_statistics",
]


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """Rated user-item interactions over dense 0-based indices.

    ``users``, ``items`` and ``ratings`` are parallel arrays, one entry per
    interaction, kept sorted by ``(user, item)``. ``category_of`` (optional)
    maps every item index to a dense category index.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    user_keys: tuple
    item_keys: tuple
    category_of: np.ndarray | None = None
    category_keys: tuple = ()

    @property
    def n_users(self) -> int:
        return len(self.user_keys)

    @property
    def n_items(self) -> int:
        return len(self.item_keys)

    @property
    def n_categories(self) -> int:
        return len(self.category_keys)

    @property
    def has_categories(self) -> bool:
        return self.category_of is not None

    def __len__(self) -> int:
        return int(self.users.shape[0])

    def interactions(self):
        for u, i, r in zip(self.users.tolist(), self.items.tolist(), self.ratings.tolist()):
            yield u, i, r

    def pairs(self) -> np.ndarray:
        return np.stack([self.users, self.items], axis=1)

    def user_degrees(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.n_users)


@dataclass(frozen=True, eq=False)
class SplitDataset:
    """Per-user random train/validation/test partition of a dataset.

    Each part is an ``(n, 2)`` int64 array of ``(user, item)`` rows sorted
    lexicographically.
    """

    dataset: InteractionDataset
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    seed: int

    @property
    def n_users(self) -> int:
        return self.dataset.n_users

    @property
    def n_items(self) -> int:
        return self.dataset.n_items

    def items_by_user(self, part: str) -> list:
        """List indexed by user of sorted item arrays for ``part``."""
        pairs = getattr(self, part)
        return _group_items(pairs, self.n_users)


def _group_items(pairs, n_users):
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs = pairs[order]
    bounds = np.searchsorted(pairs[:, 0], np.arange(n_users + 1))
    return [pairs[bounds[u]:bounds[u + 1], 1].copy() for u in range(n_users)]


# --------------------------------------------------------------------------
# loading


def _canonical(users, items, ratings):
    """Sort by (user, item) and collapse duplicate pairs keeping the max rating."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    ratings = np.asarray(ratings, dtype=np.float64)
    if users.size == 0:
        return users, items, ratings
    # max rating first within each (user, item) run
    order = np.lexsort((-ratings, items, users))
    users, items, ratings = users[order], items[order], ratings[order]
    first = np.ones(users.shape[0], dtype=bool)
    first[1:] = (users[1:] != users[:-1]) | (items[1:] != items[:-1])
    return users[first], items[first], ratings[first]


def load_categories(path, delimiter: str = "\t") -> dict:
    """Read an ``item_key, category_key`` file into a dict."""
    path = Path(path)
    mapping = {}
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split(delimiter)
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise ParseError(path, line_no, f"expected 2 columns, got {len(parts)}")
            mapping[parts[0]] = parts[1]
    return mapping


def load_interactions(path, delimiter: str = "\t", categories=None) -> InteractionDataset:
    """Parse a delimited ``user_key, item_key, rating[, category_key]`` file.

    Keys are mapped to dense indices in order of first appearance. Duplicate
    ``(user, item)`` rows collapse to one interaction holding the max rating.
    ``categories`` may be a path to an ``item_key, category_key`` file or a
    dict; it overrides any inline fourth column.
    """
    path = Path(path)
    user_index: dict = {}
    item_index: dict = {}
    users, items, ratings = [], [], []
    inline_cat: dict = {}
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split(delimiter)
            if len(parts) not in (3, 4):
                raise ParseError(path, line_no, f"expected 3 or 4 columns, got {len(parts)}")
            ukey, ikey, raw = parts[0], parts[1], parts[2]
            if not ukey or not ikey:
                raise ParseError(path, line_no, "empty user or item key")
            try:
                rating = float(raw)
            except ValueError:
                raise ParseError(path, line_no, f"rating {raw!r} is not a number") from None
            if not math.isfinite(rating):
                raise ParseError(path, line_no, f"rating {raw!r} is not finite")
            users.append(user_index.setdefault(ukey, len(user_index)))
            items.append(item_index.setdefault(ikey, len(item_index)))
            ratings.append(rating)
            if len(parts) == 4 and parts[3]:
                inline_cat[ikey] = parts[3]
    if not users:
        raise EmptyCorpusError(f"{path}: no interactions")
    u, i, r = _canonical(users, items, ratings)
    ds = InteractionDataset(u, i, r, tuple(user_index), tuple(item_index))
    if categories is not None:
        if not isinstance(categories, dict):
            categories = load_categories(categories, delimiter)
        return attach_categories(ds, categories)
    if inline_cat:
        return attach_categories(ds, inline_cat)
    return ds


def attach_categories(ds: InteractionDataset, mapping: dict) -> InteractionDataset:
    """Attach an ``item_key -> category_key`` map.

    Items without a category are dropped together with their interactions
    (with a warning) so the map covers every remaining item.
    """
    missing = [k for k in ds.item_keys if k not in mapping]
    if missing:
        log.warning("%d items have no category and are dropped", len(missing))
        keep = np.array([k in mapping for k in ds.item_keys])
        ds = _compact(ds, keep[ds.items])
        if len(ds) == 0:
            raise EmptyCorpusError("no interactions left after dropping uncategorised items")
    cat_index: dict = {}
    cats = [cat_index.setdefault(mapping[k], len(cat_index)) for k in ds.item_keys]
    return InteractionDataset(
        ds.users, ds.items, ds.ratings, ds.user_keys, ds.item_keys,
        np.asarray(cats, dtype=np.int64), tuple(cat_index),
    )


# --------------------------------------------------------------------------
# filtering


def _compact(ds: InteractionDataset, mask) -> InteractionDataset:
    """Keep masked interactions and re-densify users, items and categories."""
    users, items, ratings = ds.users[mask], ds.items[mask], ds.ratings[mask]
    kept_users = np.unique(users)
    kept_items = np.unique(items)
    umap = np.full(ds.n_users, -1, dtype=np.int64)
    umap[kept_users] = np.arange(kept_users.size)
    imap = np.full(ds.n_items, -1, dtype=np.int64)
    imap[kept_items] = np.arange(kept_items.size)
    category_of, category_keys = None, ()
    if ds.category_of is not None:
        old = ds.category_of[kept_items]
        present = np.unique(old)
        cmap = np.full(max(ds.n_categories, 1), -1, dtype=np.int64)
        cmap[present] = np.arange(present.size)
        category_of = cmap[old]
        category_keys = tuple(ds.category_keys[c] for c in present.tolist())
    return InteractionDataset(
        umap[users], imap[items], ratings,
        tuple(ds.user_keys[u] for u in kept_users.tolist()),
        tuple(ds.item_keys[i] for i in kept_items.tolist()),
        category_of, category_keys,
    )


def preprocess(ds: InteractionDataset, min_degree: int = 5, min_item_degree: int = 1) -> InteractionDataset:
    """Keep max-rated interactions, then k-core filter to a fixed point.

    Users with fewer than ``min_degree`` interactions and items with fewer
    than ``min_item_degree`` interactions are removed repeatedly until no
    more removals happen.
    """
    if len(ds) == 0:
        raise EmptyCorpusError("dataset is empty")
    users, items, ratings = _canonical(ds.users, ds.items, ds.ratings)
    keep = ratings == ratings.max()
    while True:
        ucount = np.bincount(users[keep], minlength=ds.n_users)
        icount = np.bincount(items[keep], minlength=ds.n_items)
        drop = keep & ((ucount[users] < min_degree) | (icount[items] < min_item_degree))
        if not drop.any():
            break
        keep &= ~drop
    if not keep.any():
        raise EmptyCorpusError(
            f"all interactions removed by preprocessing (min_degree={min_degree})"
        )
    base = InteractionDataset(
        users, items, ratings, ds.user_keys, ds.item_keys, ds.category_of, ds.category_keys
    )
    return _compact(base, keep)


# --------------------------------------------------------------------------
# splitting and sampling


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-12))


def split(ds: InteractionDataset, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> SplitDataset:
    """Per-user random split; validation and test sizes are rounded and the
    remainder goes to train."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ConfigurationError(f"split ratios must be 3 non-negative values summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    users, items, _ = _canonical(ds.users, ds.items, ds.ratings)
    bounds = np.searchsorted(users, np.arange(ds.n_users + 1))
    parts = ([], [], [])
    for u in range(ds.n_users):
        row = items[bounds[u]:bounds[u + 1]]
        n = row.size
        if n == 0:
            continue
        if n < 3:
            raise SplitInfeasibleError(f"user {ds.user_keys[u]!r} has {n} interactions, need >= 3")
        n_val = _round_half_up(ratios[1] * n)
        n_test = _round_half_up(ratios[2] * n)
        n_train = n - n_val - n_test
        if n_train < 1:
            raise SplitInfeasibleError(f"user {ds.user_keys[u]!r} gets no train interactions")
        shuffled = row[rng.permutation(n)]
        chunks = (shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:])
        for part, chunk in zip(parts, chunks):
            part.append(np.stack([np.full(chunk.size, u, dtype=np.int64), np.sort(chunk)], axis=1))

    def _cat(chunks):
        if not chunks:
            return np.zeros((0, 2), dtype=np.int64)
        return np.concatenate(chunks).astype(np.int64)

    return SplitDataset(ds, _cat(parts[0]), _cat(parts[1]), _cat(parts[2]), seed)


def sample_items(ds: InteractionDataset, *, count: int | None = None,
                 proportion: float | None = None, seed: int = 0) -> InteractionDataset:
    """Restrict the corpus to a random item subset.

    Exactly one of ``count`` (uniform sample of that many items) or
    ``proportion`` (``ceil(proportion * |c|)`` items kept in every category c)
    must be given. Run :func:`preprocess` afterwards.
    """
    if (count is None) == (proportion is None):
        raise ConfigurationError("give exactly one of count or proportion")
    rng = np.random.default_rng(seed)
    if count is not None:
        if not 0 < count <= ds.n_items:
            raise ConfigurationError(f"count must be in 1..{ds.n_items}, got {count}")
        chosen = np.sort(rng.choice(ds.n_items, size=count, replace=False))
    else:
        if not 0 < proportion <= 1:
            raise ConfigurationError(f"proportion must be in (0, 1], got {proportion}")
        if ds.category_of is None:
            raise ConfigurationError("per-category sampling needs category data")
        picks = []
        for c in range(ds.n_categories):
            members = np.flatnonzero(ds.category_of == c)
            if members.size == 0:
                continue
            # round() guards against 0.7 * 10 = 7.000000000000001
            take = math.ceil(round(proportion * members.size, 9))
            picks.append(rng.choice(members, size=take, replace=False))
        chosen = np.sort(np.concatenate(picks))
    keep_item = np.zeros(ds.n_items, dtype=bool)
    keep_item[chosen] = True
    return _compact(ds, keep_item[ds.items])


def dataset_statistics(ds: InteractionDataset) -> dict:
    """Counts in the layout of a dataset-statistics table."""
    return {
        "edges": len(ds),
        "users": ds.n_users,
        "items": ds.n_items,
        "categories": ds.n_categories,
    }


# --------------------------------------------------------------------------
# bundle format
#
# little-endian layout:
#   8s  magic b"FRBUNDLE"
#   u32 version, u32 n_users, u32 n_items, u32 n_categories, u32 flags
#   i64 seed, f64 rating
#   u64 n_train, u64 n_validation, u64 n_test
#   per part: i32[n] users, i32[n] items   (train, validation, test)
#   i32[n_items] category_of               (only if flags & 1)
#   3 x (u64 byte length, UTF-8 newline-joined keys): users, items, categories
#   8s  blake2b-64 digest of every preceding byte

_BUNDLE_MAGIC = b"FRBUNDLE"
_BUNDLE_VERSION = 1
_BUNDLE_HEADER = struct.Struct("<8sIIIIIqdQQQ")


def _digest(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def _pack_keys(keys) -> bytes:
    blob = "\n".join(keys).encode("utf-8")
    return struct.pack("<Q", len(blob)) + blob


def save_bundle(path, splits: SplitDataset) -> None:
    ds = splits.dataset
    flags = 1 if ds.has_categories else 0
    rating = float(ds.ratings.max()) if len(ds) else 0.0
    chunks = [
        _BUNDLE_HEADER.pack(
            _BUNDLE_MAGIC, _BUNDLE_VERSION, ds.n_users, ds.n_items, ds.n_categories,
            flags, splits.seed, rating,
            len(splits.train), len(splits.validation), len(splits.test),
        )
    ]
    for part in (splits.train, splits.validation, splits.test):
        chunks.append(part[:, 0].astype("<i4").tobytes())
        chunks.append(part[:, 1].astype("<i4").tobytes())
    if flags & 1:
        chunks.append(ds.category_of.astype("<i4").tobytes())
    for keys in (ds.user_keys, ds.item_keys, ds.category_keys):
        chunks.append(_pack_keys(keys))
    payload = b"".join(chunks)
    Path(path).write_bytes(payload + _digest(payload))


def load_bundle(path) -> SplitDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _BUNDLE_HEADER.size + 8:
        raise FormatError(f"{path}: truncated bundle")
    payload, digest = raw[:-8], raw[-8:]
    if _digest(payload) != digest:
        raise FormatError(f"{path}: bundle checksum mismatch")
    (magic, version, n_users, n_items, n_cat, flags, seed, rating,
     n_tr, n_va, n_te) = _BUNDLE_HEADER.unpack_from(payload, 0)
    if magic != _BUNDLE_MAGIC or version != _BUNDLE_VERSION:
        raise FormatError(f"{path}: not a version-{_BUNDLE_VERSION} dataset bundle")
    off = _BUNDLE_HEADER.size

    def take(n):
        nonlocal off
        arr = np.frombuffer(payload, dtype="<i4", count=n, offset=off).astype(np.int64)
        off += 4 * n
        return arr

    parts = []
    for n in (n_tr, n_va, n_te):
        u = take(n)
        i = take(n)
        parts.append(np.stack([u, i], axis=1))
    category_of = take(n_items) if flags & 1 else None

    def keys():
        nonlocal off
        (length,) = struct.unpack_from("<Q", payload, off)
        off += 8
        blob = payload[off:off + length].decode("utf-8")
        off += length
        return tuple(blob.split("\n")) if blob else ()

    user_keys, item_keys, category_keys = keys(), keys(), keys()
    if off != len(payload) or len(user_keys) != n_users or len(item_keys) != n_items:
        raise FormatError(f"{path}: inconsistent bundle layout")
    allpairs = np.concatenate(parts)
    users, items, ratings = _canonical(allpairs[:, 0], allpairs[:, 1], np.full(len(allpairs), rating))
    ds = InteractionDataset(
        users, items, ratings, user_keys, item_keys,
        category_of, category_keys if flags & 1 else (),
    )
    return SplitDataset(ds, parts[0], parts[1], parts[2], seed)
