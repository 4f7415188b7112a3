"""Synthetic implicit feedback with a long-tailed item exposure.

Each user draws interactions with probability proportional to
``exposure_i ** skew * preference_ui``, where exposure follows a Zipf law
and preference is a logistic function of latent factor agreement. The
observed log is therefore dominated by popular items while the preference
signal is popularity-free, which is the setting debiased evaluation probes.
"""

from __future__ import annotations

import numpy as np

from .dataset import InteractionDataset


def popularity_biased_interactions(n_users=2000, n_items=300, dim=8, mean_degree=10,
                                   zipf=1.0, skew=1.0, sharpness=8.0, seed=0):
    rng = np.random.default_rng(seed)
    x_u = rng.normal(size=(n_users, dim)) / np.sqrt(dim)
    z_i = rng.normal(size=(n_items, dim))
    pref = 1.0 / (1.0 + np.exp(-sharpness * (x_u @ z_i.T)))
    exposure = 1.0 / np.arange(1, n_items + 1) ** zipf
    exposure = exposure[rng.permutation(n_items)]
    activity = rng.lognormal(0.0, 0.5, size=n_users)
    degrees = np.clip(np.round(mean_degree * activity / activity.mean()), 2, n_items // 2).astype(int)
    users, items = [], []
    for u in range(n_users):
        p = exposure**skew * pref[u]
        p /= p.sum()
        chosen = rng.choice(n_items, size=degrees[u], replace=False, p=p)
        users.extend([u] * len(chosen))
        items.extend(chosen.tolist())
    users = np.array(users)
    items = np.array(items)
    # every item needs at least one interaction for the debiased split
    missing = np.setdiff1d(np.arange(n_items), items)
    if len(missing):
        extra_u = rng.integers(n_users, size=len(missing))
        users = np.concatenate([users, extra_u])
        items = np.concatenate([items, missing])
    return InteractionDataset.from_pairs(n_users, n_items, zip(users.tolist(), items.tolist()))


def write_log(data, path):
    """Write ``u<i>\\ti<j>`` lines, one interaction each."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i in zip(data.users.tolist(), data.items.tolist()):
            fh.write(f"u{u}\ti{i}\n")
