"""All-ranking top-K evaluation and group-level popularity analyses."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import group_by_count
from .model import sigmoid


@dataclass
class RankingResult:
    users: np.ndarray
    lists: list  # one int array per user, best first, length <= K
    mode: str = "TE"
    c: float | None = None

    def as_dict(self):
        return dict(zip(self.users.tolist(), self.lists))


def excluded_sets(n_users, *pair_arrays):
    """Per-user sets of items that must not be recommended."""
    out = [set() for _ in range(n_users)]
    for pairs in pair_arrays:
        for u, i in np.asarray(pairs).reshape(-1, 2).tolist():
            out[u].add(i)
    return out


def test_sets(pairs):
    """Group (user, item) pairs into {user: set(items)}."""
    out = {}
    for u, i in np.asarray(pairs).reshape(-1, 2).tolist():
        out.setdefault(u, set()).add(i)
    return out


def top_k_rows(scores, k):
    """Top-k column indices per row, ties broken by ascending index.

    ``-inf`` entries are never returned.
    """
    out = []
    k_eff = min(k, scores.shape[1])
    part = np.partition(scores, scores.shape[1] - k_eff, axis=1)[:, scores.shape[1] - k_eff]
    for row, thr in zip(scores, part):
        cand = np.flatnonzero((row >= thr) & np.isfinite(row)) if np.isfinite(thr) else np.flatnonzero(np.isfinite(row))
        order = np.lexsort((cand, -row[cand]))
        out.append(cand[order][:k])
    return out


def rank_all_items(model, users, excluded, k, c=None, chunk=1024, threads=1):
    """Score every item for each user and keep the top ``k`` admissible ones.

    ``c=None`` ranks by the normal (total-effect) score; a number switches
    MACR models to counterfactual scoring with that reference value.
    With ``threads > 1`` user chunks are ranked concurrently; the output
    order does not depend on the thread count.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    users = np.asarray(users, dtype=np.int64)
    model.propagate()  # fill the cache before any worker reads it

    def rank_block(block):
        scores = np.array(model.score_matrix(block, c=c), dtype=float)
        for row, u in enumerate(block.tolist()):
            ex = excluded[u]
            if len(ex) >= model.n_items:
                raise ValueError(f"user {u} has every item excluded")
            if ex:
                scores[row, list(ex)] = -np.inf
        return top_k_rows(scores, k)

    blocks = [users[s:s + chunk] for s in range(0, len(users), chunk)]
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(rank_block, blocks))
    else:
        parts = [rank_block(b) for b in blocks]
    lists = [lst for part in parts for lst in part]
    return RankingResult(users, lists, "TE" if c is None else "TIE", c)


def _per_user(result, test, k):
    for u, lst in zip(result.users.tolist(), result.lists):
        truth = test.get(u)
        if truth:
            yield lst[:k], truth


def hr_at_k(result, test, k):
    vals = [float(any(i in truth for i in lst)) for lst, truth in _per_user(result, test, k)]
    return float(np.mean(vals)) if vals else 0.0


def recall_at_k(result, test, k):
    vals = [sum(i in truth for i in lst) / len(truth) for lst, truth in _per_user(result, test, k)]
    return float(np.mean(vals)) if vals else 0.0


def ndcg_at_k(result, test, k):
    vals = []
    for lst, truth in _per_user(result, test, k):
        dcg = sum(1.0 / np.log2(r + 2) for r, i in enumerate(lst) if i in truth)
        idcg = sum(1.0 / np.log2(r + 2) for r in range(min(len(truth), k)))
        vals.append(dcg / idcg)
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class MetricReport:
    ks: list
    hr: dict
    recall: dict
    ndcg: dict
    n_users: int
    mode: str = "TE"
    c: float | None = None

    def rows(self):
        return [{"K": k, "HR": self.hr[k], "Recall": self.recall[k], "NDCG": self.ndcg[k],
                 "n_users": self.n_users, "mode": self.mode, "c": "" if self.c is None else self.c}
                for k in self.ks]

    def to_csv(self, path):
        _write_csv(path, self.rows())

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.rows(), fh, indent=1)
            fh.write("\n")


def metric_report(result, test, ks):
    ks = sorted(ks)
    n = sum(1 for u in result.users.tolist() if test.get(u))
    return MetricReport(ks, {k: hr_at_k(result, test, k) for k in ks},
                        {k: recall_at_k(result, test, k) for k in ks},
                        {k: ndcg_at_k(result, test, k) for k in ks}, n, result.mode, result.c)


def evaluate(model, split, ks=(20,), mode="TE", c=None, on="test", threads=1):
    """HR/Recall/NDCG at each K on ``split.test`` (or ``split.valid``).

    Train positives are always excluded; valid positives too when scoring test.
    """
    if mode not in ("TE", "TIE"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "TIE" and c is None:
        raise ValueError("TIE mode needs a reference value c")
    train_pairs = np.stack([split.train.users, split.train.items], axis=1)
    if on == "test":
        truth_pairs, ex = split.test, excluded_sets(split.n_users, train_pairs, split.valid)
    elif on == "valid":
        truth_pairs, ex = split.valid, excluded_sets(split.n_users, train_pairs)
    else:
        raise ValueError(f"unknown evaluation set {on!r}")
    truth = test_sets(truth_pairs)
    users = np.array(sorted(truth), dtype=np.int64)
    result = rank_all_items(model, users, ex, max(ks), c=c if mode == "TIE" else None, threads=threads)
    return metric_report(result, truth, ks), result


# --- group analyses --------------------------------------------------------

@dataclass
class GroupAnalysis:
    quantity: str
    rows: list = field(default_factory=list)  # dicts with group, lower, size, value

    def values(self):
        return np.array([r["value"] for r in self.rows], dtype=float)

    def to_csv(self, path):
        _write_csv(path, [dict(r, quantity=self.quantity) for r in self.rows])


def _group_rows(groups, edges, per_entity, mask=None):
    rows = []
    for g, lower in enumerate(edges):
        members = groups == g
        vals = per_entity[members if mask is None else members & mask]
        rows.append({"group": g, "lower": float(lower), "size": int(members.sum()),
                     "value": float(vals.mean()) if len(vals) else float("nan")})
    return rows


def analyze_recommendation_frequency(result, profile):
    """Mean number of top-K appearances per item, per popularity group."""
    freq = np.zeros(len(profile.item_counts))
    for lst in result.lists:
        np.add.at(freq, lst, 1)
    return GroupAnalysis("recommendation_frequency", _group_rows(profile.groups, profile.group_boundaries, freq))


def analyze_group_recall(result, test, profile):
    """Per-item share of its test occurrences that were recommended, averaged per group.

    Items absent from the test set are left out of their group's mean.
    """
    n_items = len(profile.item_counts)
    hits = np.zeros(n_items)
    occ = np.zeros(n_items)
    lists = result.as_dict()
    for u, items in test.items():
        rec = set(np.asarray(lists.get(u, [])).tolist())
        for i in items:
            occ[i] += 1
            hits[i] += i in rec
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(occ > 0, hits / np.maximum(occ, 1), np.nan)
    return GroupAnalysis("item_recall", _group_rows(profile.groups, profile.group_boundaries, recall, occ > 0))


def analyze_branch_activation(model, side, counts, n_bins=10, policy="width"):
    """Mean sigmoid(branch score) per activity group (``side`` is user or item)."""
    edges, groups = group_by_count(counts, n_bins, policy)
    idx = np.arange(len(counts))
    raw = model.user_branch(idx) if side == "user" else model.item_branch(idx)
    return GroupAnalysis(f"mean_sigmoid_{side}_branch", _group_rows(groups, edges, sigmoid(raw)))


def _write_csv(path, rows):
    if not rows:
        open(path, "w").close()
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
