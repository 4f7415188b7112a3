"""Implicit-feedback interaction data, debiased splitting and negative sampling."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    """Raised for unreadable or inconsistent interaction data."""


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """Binary user-item interactions over dense index spaces.

    ``users`` and ``items`` are parallel arrays, sorted by (user, item) and
    free of duplicates.
    """

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64)
        items = np.asarray(self.items, dtype=np.int64)
        if users.shape != items.shape:
            raise DataError("users and items must have equal length")
        if len(users) and (users.min() < 0 or users.max() >= self.n_users
                           or items.min() < 0 or items.max() >= self.n_items):
            raise DataError("interaction index out of range")
        keys = users * self.n_items + items
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
        if len(keys) > 1 and np.any(keys[1:] == keys[:-1]):
            raise DataError("duplicate interaction")
        object.__setattr__(self, "users", users[order])
        object.__setattr__(self, "items", items[order])
        object.__setattr__(self, "_keys", keys)

    @classmethod
    def from_pairs(cls, n_users, n_items, pairs):
        """Build from (user, item) pairs, collapsing duplicates."""
        arr = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
        if len(arr):
            arr = np.unique(arr, axis=0)
        return cls(n_users, n_items, arr[:, 0], arr[:, 1])

    def __len__(self):
        return len(self.users)

    @property
    def positives(self):
        return set(zip(self.users.tolist(), self.items.tolist()))

    def contains(self, users, items):
        """Vectorised membership test for (user, item) pairs."""
        keys = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items, dtype=np.int64)
        if not len(self._keys):
            return np.zeros(keys.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(self._keys, keys), len(self._keys) - 1)
        return self._keys[pos] == keys

    def user_degrees(self):
        return np.bincount(self.users, minlength=self.n_users)

    def item_degrees(self):
        return np.bincount(self.items, minlength=self.n_items)

    @property
    def per_user_positives(self):
        return _adjacency(self.users, self.items, self.n_users)

    @property
    def per_item_positives(self):
        return _adjacency(self.items, self.users, self.n_items)


def _adjacency(src, dst, n):
    out = [[] for _ in range(n)]
    for s, d in zip(src.tolist(), dst.tolist()):
        out[s].append(d)
    return [np.array(sorted(x), dtype=np.int64) for x in out]


@dataclass(frozen=True)
class IdMap:
    users: list
    items: list


def load_interactions(path, delimiter="\t"):
    """Read a ``user<delim>item`` log and reindex raw tokens densely.

    Returns ``(dataset, id_map)``. Tokens are numbered in order of first
    appearance. Blank lines and lines starting with ``#`` are ignored; a
    ``None`` delimiter splits on any whitespace.
    """
    user_ids, item_ids = {}, {}
    pairs = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(delimiter)
            if len(parts) < 2 or not parts[0].strip() or not parts[1].strip():
                raise DataError(f"{path}:{lineno}: malformed line {line!r}")
            u = user_ids.setdefault(parts[0].strip(), len(user_ids))
            i = item_ids.setdefault(parts[1].strip(), len(item_ids))
            pairs.append((u, i))
    if not user_ids or not item_ids:
        raise DataError(f"{path}: zero users or zero items")
    data = InteractionDataset.from_pairs(len(user_ids), len(item_ids), pairs)
    return data, IdMap(list(user_ids), list(item_ids))


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.1
    valid_fraction: float = 0.1
    rng_seed: int = 2021

    def __post_init__(self):
        for name in ("test_fraction", "valid_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise DataError(f"{name} must lie in (0, 1), got {v}")
        if self.test_fraction + self.valid_fraction >= 1.0:
            raise DataError("test_fraction + valid_fraction must be < 1")


@dataclass(frozen=True)
class DatasetSplit:
    train: InteractionDataset
    valid: np.ndarray  # (n, 2) user/item pairs
    test: np.ndarray
    id_map: IdMap | None = field(default=None, compare=False)

    @property
    def n_users(self):
        return self.train.n_users

    @property
    def n_items(self):
        return self.train.n_items


def _draw_item_uniform(pool, remaining, n_draws, rng):
    """Pop ``n_draws`` interactions: uniform item from the pool, then a
    uniform interaction among that item's remaining ones."""
    taken = []
    for _ in range(n_draws):
        slot = int(rng.integers(len(pool)))
        item = pool[slot]
        bucket = remaining[item]
        j = int(rng.integers(len(bucket)))
        taken.append(bucket[j])
        bucket[j] = bucket[-1]
        bucket.pop()
        if not bucket:
            pool[slot] = pool[-1]
            pool.pop()
    return taken


def build_debiased_split(data: InteractionDataset, spec: SplitSpec, id_map=None) -> DatasetSplit:
    """Sample test, then valid, so that each is uniform over items.

    Items whose interactions run out leave the sampling pool. Counts are
    ``floor(fraction * len(data))``; the remainder is training data.
    """
    n = len(data)
    degrees = data.item_degrees()
    if np.any(degrees == 0):
        raise DataError(f"item {int(np.argmin(degrees))} has no interactions")
    n_test = int(np.floor(spec.test_fraction * n))
    n_valid = int(np.floor(spec.valid_fraction * n))
    if n - n_test - n_valid <= 0:
        raise DataError("split leaves the training set empty")

    # interaction ids grouped by item, in (user, item) order
    remaining = [[] for _ in range(data.n_items)]
    for idx, item in enumerate(data.items.tolist()):
        remaining[item].append(idx)
    pool = list(range(data.n_items))
    rng = np.random.default_rng(spec.rng_seed)
    test_idx = _draw_item_uniform(pool, remaining, n_test, rng)
    valid_idx = _draw_item_uniform(pool, remaining, n_valid, rng)

    in_train = np.ones(n, dtype=bool)
    in_train[test_idx] = False
    in_train[valid_idx] = False
    pairs = np.stack([data.users, data.items], axis=1)
    train = InteractionDataset(data.n_users, data.n_items, data.users[in_train], data.items[in_train])
    return DatasetSplit(train, _sorted_pairs(pairs[valid_idx]), _sorted_pairs(pairs[test_idx]), id_map)


def _sorted_pairs(pairs):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]


@dataclass(frozen=True)
class LabeledBatch:
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def take(self, idx):
        return LabeledBatch(self.users[idx], self.items[idx], self.labels[idx])


def sample_negatives(train: InteractionDataset, ratio=1, rng=None) -> LabeledBatch:
    """Positives (label 1) followed by ``ratio`` uniform negatives per positive.

    ``rng`` may be a seed or a ``numpy.random.Generator``. Negatives for user
    ``u`` are drawn uniformly from items ``u`` never interacted with.
    """
    if ratio < 1:
        raise DataError("negative ratio must be >= 1")
    rng = np.random.default_rng(rng)
    full = np.flatnonzero(train.user_degrees() >= train.n_items)
    if len(full):
        raise DataError(f"user {int(full[0])} interacted with every item; cannot sample negatives")
    neg_users = np.repeat(train.users, ratio)
    neg_items = rng.integers(train.n_items, size=len(neg_users))
    bad = np.flatnonzero(train.contains(neg_users, neg_items))
    while len(bad):
        neg_items[bad] = rng.integers(train.n_items, size=len(bad))
        bad = bad[train.contains(neg_users[bad], neg_items[bad])]
    users = np.concatenate([train.users, neg_users])
    items = np.concatenate([train.items, neg_items])
    labels = np.concatenate([np.ones(len(train)), np.zeros(len(neg_users))])
    return LabeledBatch(users, items, labels)


@dataclass(frozen=True)
class PopularityProfile:
    item_counts: np.ndarray
    group_boundaries: np.ndarray  # ascending lower edges, one per group
    groups: np.ndarray  # group id per item

    @property
    def n_groups(self):
        return len(self.group_boundaries)

    def members(self, g):
        return np.flatnonzero(self.groups == g)


def group_by_count(counts, n_bins=10, policy="width"):
    """Bin entities by an activity count.

    ``width`` uses equal-width bins over the count range and drops empty
    bins; ``quantile`` sorts by count and cuts into equally sized groups.
    Returns ``(lower_edges, group_ids)`` with groups ordered by count.
    """
    counts = np.asarray(counts)
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if policy == "width":
        lo, hi = counts.min(), counts.max()
        if hi == lo:
            return np.array([lo], dtype=float), np.zeros(len(counts), dtype=np.int64)
        edges = np.linspace(lo, hi, n_bins + 1)
        raw = np.clip(np.searchsorted(edges, counts, side="right") - 1, 0, n_bins - 1)
        used = np.unique(raw)
        return edges[used].astype(float), np.searchsorted(used, raw)
    if policy == "quantile":
        order = np.argsort(counts, kind="stable")
        n_groups = min(n_bins, len(counts))
        ids = np.empty(len(counts), dtype=np.int64)
        ids[order] = np.arange(len(counts)) * n_groups // len(counts)
        lower = np.array([counts[ids == g].min() for g in range(n_groups)], dtype=float)
        return lower, ids
    raise ValueError(f"unknown grouping policy {policy!r}")


def item_popularity(train: InteractionDataset, n_bins=10, policy="width") -> PopularityProfile:
    counts = train.item_degrees()
    edges, groups = group_by_count(counts, n_bins, policy)
    return PopularityProfile(counts, edges, groups)


# --- split files -----------------------------------------------------------

SPLIT_FILES = ("train.tsv", "valid.tsv", "test.tsv")


def _write_pairs(path, pairs):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i in pairs:
            fh.write(f"{u}\t{i}\n")


def save_split(split: DatasetSplit, out_dir, seed):
    """Write train/valid/test as dense-index TSV, plus ``meta.jsonl`` and
    ``id_map.json`` (position = dense index, value = raw token)."""
    os.makedirs(out_dir, exist_ok=True)
    train_pairs = np.stack([split.train.users, split.train.items], axis=1)
    for name, pairs in zip(SPLIT_FILES, (train_pairs, split.valid, split.test)):
        _write_pairs(os.path.join(out_dir, name), pairs.tolist())
    meta = {
        "n_users": split.n_users,
        "n_items": split.n_items,
        "counts": {"train": len(split.train), "valid": len(split.valid), "test": len(split.test)},
        "seed": seed,
    }
    with open(os.path.join(out_dir, "meta.jsonl"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
    if split.id_map is not None:
        with open(os.path.join(out_dir, "id_map.json"), "w", encoding="utf-8") as fh:
            json.dump({"users": split.id_map.users, "items": split.id_map.items}, fh)


def _read_pairs(path):
    try:
        arr = np.loadtxt(path, dtype=np.int64, delimiter="\t", ndmin=2, comments="#")
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read split file {path}: {exc}") from exc
    return arr.reshape(-1, 2)


def load_split(split_dir) -> DatasetSplit:
    meta_path = os.path.join(split_dir, "meta.jsonl")
    try:
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.loads(fh.readline())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {meta_path}: {exc}") from exc
    train, valid, test = (_read_pairs(os.path.join(split_dir, f)) for f in SPLIT_FILES)
    id_map = None
    map_path = os.path.join(split_dir, "id_map.json")
    if os.path.exists(map_path):
        with open(map_path, encoding="utf-8") as fh:
            raw = json.load(fh)
        id_map = IdMap(raw["users"], raw["items"])
    train_ds = InteractionDataset(meta["n_users"], meta["n_items"], train[:, 0], train[:, 1])
    return DatasetSplit(train_ds, valid, test, id_map)
