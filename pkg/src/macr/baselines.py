"""Popularity-debiasing baselines that share the MF/LightGCN backbones.

BS adds a learned per-item bias while training and drops it at test time.
IPW reweights every training example by a clipped inverse item popularity.
Reg is a simplified long-tail penalty: ``coeff * sum(pop_norm(i) * sigmoid(s)^2)``
over the batch, pushing popular items' scores down. It is a stand-in for the
original regularizer, not a faithful reimplementation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import bce_loss, sigmoid


def bs_score(y_k, b_i, mode="test"):
    if mode == "train":
        return y_k + b_i
    if mode == "test":
        return y_k
    raise ValueError(f"unknown mode {mode!r}")


def ipw_weight(popularity, smoothing=1.0, clip_max=np.inf):
    """Clipped inverse popularity, before any batch renormalization."""
    popularity = np.asarray(popularity, dtype=float)
    if np.any(popularity < 0):
        raise ValueError("popularity must be non-negative")
    return np.minimum(1.0 / (popularity + smoothing), clip_max)


def normalize_batch_weights(w):
    """Rescale so the weights average 1 over the batch."""
    w = np.asarray(w, dtype=float)
    return w / w.mean()


@dataclass(frozen=True)
class PropensityWeights:
    weights: np.ndarray  # per item, pre-normalization
    clip_max: float

    @classmethod
    def fit(cls, item_counts, smoothing=1.0, clip_quantile=0.95):
        raw = ipw_weight(item_counts, smoothing)
        clip = float(np.quantile(raw, clip_quantile))
        return cls(np.minimum(raw, clip), clip)

    def for_batch(self, items):
        return normalize_batch_weights(self.weights[items])


def ipw_loss(scores, labels, weights):
    """Weighted-mean BCE; ``weights`` are already per example."""
    return bce_loss(scores, labels, weights=np.asarray(weights, dtype=float))


def popularity_norm(item_counts):
    counts = np.asarray(item_counts, dtype=float)
    top = counts.max()
    return counts / top if top > 0 else counts


def reg_penalty(scores, items, pop_norm, coeff=1e-4):
    return float(coeff * np.sum(pop_norm[items] * sigmoid(scores) ** 2))


def reg_penalty_grad(scores, items, pop_norm, coeff=1e-4):
    """d reg_penalty / d scores."""
    s = sigmoid(scores)
    return coeff * pop_norm[items] * 2.0 * s * s * (1.0 - s)
