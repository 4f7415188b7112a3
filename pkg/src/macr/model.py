"""Three-branch recommender: matching backbone plus user and item heads.

Training scores fuse the branches as ``y_k * sigmoid(y_i) * sigmoid(y_u)``;
counterfactual inference ranks by ``(y_k - c) * sigmoid(y_i) * sigmoid(y_u)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .backbone import BackboneKind, NormalizedAdjacency, lightgcn_propagate, xavier_init

MODEL_KINDS = ("plain", "macr", "bs", "ipw", "reg")
HEAD_KINDS = ("affine", "mlp")


class StalePropagationError(RuntimeError):
    pass


def sigmoid(x):
    return expit(x)


def softplus(x):
    return np.logaddexp(0.0, x)


def fuse_scores(y_k, y_i, y_u):
    return y_k * sigmoid(y_i) * sigmoid(y_u)


def counterfactual_score(y_k, y_i, y_u, c):
    return (y_k - c) * sigmoid(y_i) * sigmoid(y_u)


def bce_loss(scores, labels, weights=None):
    """Mean binary cross-entropy on logits, computed as softplus(s) - y*s."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {scores.shape} vs {labels.shape}")
    if scores.size == 0:
        raise ValueError("empty batch")
    per = softplus(scores) - labels * scores
    if weights is not None:
        per = per * weights
    return float(per.mean())


# --- branch heads ----------------------------------------------------------

def init_head(kind, dim, rng):
    """Parameters of a scalar head over ``dim``-wide embeddings."""
    if kind == "affine":
        return {"w": xavier_init(dim, 1, rng)[:, 0], "b": np.zeros(1)}
    if kind == "mlp":
        return {
            "W1": xavier_init(dim, dim, rng),
            "b1": np.zeros(dim),
            "w2": xavier_init(dim, 1, rng)[:, 0],
            "b2": np.zeros(1),
        }
    raise ValueError(f"unknown head kind {kind!r}")


def head_forward(kind, p, x):
    """Return (scores, cache) for embeddings ``x`` of shape (n, dim)."""
    if kind == "affine":
        return x @ p["w"] + p["b"][0], None
    hidden = np.tanh(x @ p["W1"] + p["b1"])
    return hidden @ p["w2"] + p["b2"][0], hidden


def head_backward(kind, p, x, cache, g):
    """Gradients of sum(g * head(x)) w.r.t. head params and ``x``."""
    if kind == "affine":
        return {"w": x.T @ g, "b": np.array([g.sum()])}, np.outer(g, p["w"])
    dz = np.outer(g, p["w2"]) * (1.0 - cache**2)
    grads = {"W1": x.T @ dz, "b1": dz.sum(axis=0), "w2": cache.T @ g, "b2": np.array([g.sum()])}
    return grads, dz @ p["W1"].T


@dataclass(frozen=True)
class BranchHead:
    """Read-only view of one head inside a model's parameter dict."""

    kind: str
    params: dict

    def __call__(self, x):
        return head_forward(self.kind, self.params, np.atleast_2d(x))[0]


# --- model -----------------------------------------------------------------

class MacrModel:
    """Parameters and forward pass for MF/LightGCN with optional branches.

    ``kind`` selects the training objective family: ``plain`` (backbone only),
    ``macr`` (three branches), ``bs`` (per-item bias added while training),
    ``ipw`` and ``reg`` (backbone only, different losses). Parameters live in
    ``params`` keyed ``user_emb``, ``item_emb``, ``user_head.*``,
    ``item_head.*`` and ``item_bias``.
    """

    def __init__(self, n_users, n_items, dim=64, backbone=BackboneKind(), kind="macr",
                 head_kind="affine", adjacency: NormalizedAdjacency | None = None,
                 use_user_branch=True, use_item_branch=True, branch_input="layer0", rng_seed=0):
        if kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {kind!r}")
        if head_kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {head_kind!r}")
        if branch_input not in ("layer0", "propagated"):
            raise ValueError(f"unknown branch input {branch_input!r}")
        if backbone.variant == "LightGCN" and adjacency is None:
            raise ValueError("LightGCN needs the training adjacency")
        self.n_users, self.n_items, self.dim = n_users, n_items, dim
        self.backbone = backbone
        self.kind = kind
        self.head_kind = head_kind
        self.adjacency = adjacency
        self.use_user_branch = use_user_branch and kind == "macr"
        self.use_item_branch = use_item_branch and kind == "macr"
        self.branch_input = branch_input
        self.stamp = 0
        self._prop = None

        seq = np.random.SeedSequence(rng_seed)
        r_u, r_i, r_hu, r_hi = (np.random.default_rng(s) for s in seq.spawn(4))
        self.params = {"user_emb": xavier_init(n_users, dim, r_u), "item_emb": xavier_init(n_items, dim, r_i)}
        if self.use_user_branch:
            for k, v in init_head(head_kind, dim, r_hu).items():
                self.params[f"user_head.{k}"] = v
        if self.use_item_branch:
            for k, v in init_head(head_kind, dim, r_hi).items():
                self.params[f"item_head.{k}"] = v
        if kind == "bs":
            self.params["item_bias"] = np.zeros(n_items)

    # parameter bookkeeping

    def head_params(self, side):
        prefix = f"{side}_head."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    @property
    def user_head(self):
        return BranchHead(self.head_kind, self.head_params("user")) if self.use_user_branch else None

    @property
    def item_head(self):
        return BranchHead(self.head_kind, self.head_params("item")) if self.use_item_branch else None

    def touch(self):
        """Mark parameters as changed; invalidates the propagation cache."""
        self.stamp += 1

    def copy(self):
        other = object.__new__(MacrModel)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other._prop = None
        return other

    # forward pieces

    def propagate(self):
        """Embeddings seen by the matching function, recomputed on demand."""
        if self.backbone.variant == "MF":
            return self.params["user_emb"], self.params["item_emb"]
        if self._prop is None or self._prop[0] != self.stamp:
            out = lightgcn_propagate(self.params["user_emb"], self.params["item_emb"],
                                     self.adjacency, self.backbone.layers)
            self._prop = (self.stamp, out)
        return self._prop[1]

    def propagation_snapshot(self):
        """(stamp, user, item) tables for reuse across one epoch of updates."""
        u, i = self.propagate()
        return (self.stamp, u, i)

    def _tables(self, snapshot=None, allow_stale=False):
        if snapshot is None:
            return self.propagate()
        stamp, u, i = snapshot
        if stamp != self.stamp and not allow_stale:
            raise StalePropagationError(f"propagation from stamp {stamp}, parameters at {self.stamp}")
        return u, i

    def branch_inputs(self, snapshot=None, allow_stale=False):
        if self.branch_input == "layer0" or self.backbone.variant == "MF":
            return self.params["user_emb"], self.params["item_emb"]
        return self._tables(snapshot, allow_stale)

    def match_scores(self, users, items, snapshot=None, allow_stale=False):
        u, i = self._tables(snapshot, allow_stale)
        return np.sum(u[users] * i[items], axis=-1)

    def match_score(self, u, i):
        return float(self.match_scores(np.array([u]), np.array([i]))[0])

    def _check_index(self, idx, n, what):
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError(f"{what} index out of range")

    def item_branch(self, items, snapshot=None, allow_stale=False):
        """Raw item-branch scores (zeros when the branch is absent)."""
        self._check_index(items, self.n_items, "item")
        if not self.use_item_branch:
            return np.zeros(np.shape(items))
        _, x = self.branch_inputs(snapshot, allow_stale)
        return head_forward(self.head_kind, self.head_params("item"), x[np.atleast_1d(items)])[0].reshape(np.shape(items))

    def user_branch(self, users, snapshot=None, allow_stale=False):
        self._check_index(users, self.n_users, "user")
        if not self.use_user_branch:
            return np.zeros(np.shape(users))
        x, _ = self.branch_inputs(snapshot, allow_stale)
        return head_forward(self.head_kind, self.head_params("user"), x[np.atleast_1d(users)])[0].reshape(np.shape(users))

    def item_multiplier(self, items, **kw):
        """sigmoid(item branch), or 1 when the branch is disabled."""
        if not self.use_item_branch:
            return np.ones(np.shape(items))
        return sigmoid(self.item_branch(items, **kw))

    def user_multiplier(self, users, **kw):
        if not self.use_user_branch:
            return np.ones(np.shape(users))
        return sigmoid(self.user_branch(users, **kw))

    def train_scores(self, users, items, snapshot=None, allow_stale=False):
        """Scores the training loss sees for each (user, item)."""
        kw = {"snapshot": snapshot, "allow_stale": allow_stale}
        y_k = self.match_scores(users, items, **kw)
        if self.kind == "macr":
            return y_k * self.item_multiplier(items, **kw) * self.user_multiplier(users, **kw)
        if self.kind == "bs":
            return y_k + self.params["item_bias"][items]
        return y_k

    def score_matrix(self, users, c=None):
        """Inference scores for ``users`` against every item.

        MACR models rank by the fused score, or the counterfactual score when
        ``c`` is given; BS drops the item bias; other kinds use y_k.
        """
        u_tab, i_tab = self.propagate()
        y_k = u_tab[users] @ i_tab.T
        if self.kind != "macr":
            return y_k
        all_items = np.arange(self.n_items)
        m_i = self.item_multiplier(all_items)
        m_u = self.user_multiplier(np.asarray(users))
        if c is not None:
            y_k = y_k - c
        return y_k * m_u[:, None] * m_i[None, :]


# --- losses ----------------------------------------------------------------

def macr_loss(model: MacrModel, batch, alpha, beta, snapshot=None, allow_stale=False):
    """Return ``(total, {"L_O", "L_I", "L_U"})`` for one labeled batch.

    Each term is a batch-mean BCE; a disabled branch contributes zero.
    """
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    kw = {"snapshot": snapshot, "allow_stale": allow_stale}
    y_k = model.match_scores(batch.users, batch.items, **kw)
    y_i = model.item_branch(batch.items, **kw)
    y_u = model.user_branch(batch.users, **kw)
    m_i = sigmoid(y_i) if model.use_item_branch else 1.0
    m_u = sigmoid(y_u) if model.use_user_branch else 1.0
    l_o = bce_loss(y_k * m_i * m_u, batch.labels)
    l_i = bce_loss(y_i, batch.labels) if model.use_item_branch else 0.0
    l_u = bce_loss(y_u, batch.labels) if model.use_user_branch else 0.0
    return l_o + alpha * l_i + beta * l_u, {"L_O": l_o, "L_I": l_i, "L_U": l_u}


# --- causal effects --------------------------------------------------------

@dataclass(frozen=True)
class CausalReference:
    """Mean embeddings standing in for the muted user/item.

    ``user_match``/``item_match`` feed the matching function (propagated
    tables under LightGCN); ``user_branch``/``item_branch`` feed the heads.
    ``c`` is the matching score of the two reference embeddings.
    """

    user_match: np.ndarray
    item_match: np.ndarray
    user_branch: np.ndarray
    item_branch: np.ndarray

    @property
    def c(self):
        return float(self.user_match @ self.item_match)

    @classmethod
    def from_model(cls, model: MacrModel):
        u, i = model.propagate()
        bu, bi = model.branch_inputs()
        return cls(u.mean(axis=0), i.mean(axis=0), bu.mean(axis=0), bi.mean(axis=0))


def _multipliers(model, user_x, item_x):
    m_i = sigmoid(float(model.item_head(item_x)[0])) if model.use_item_branch else 1.0
    m_u = sigmoid(float(model.user_head(user_x)[0])) if model.use_user_branch else 1.0
    return m_i, m_u


def _parts(model, ref, u, i):
    y_k = model.match_score(u, i)
    m_i = sigmoid(model.item_branch(np.array([i]))[0]) if model.use_item_branch else 1.0
    m_u = sigmoid(model.user_branch(np.array([u]))[0]) if model.use_user_branch else 1.0
    ref_i, ref_u = _multipliers(model, ref.user_branch, ref.item_branch)
    return y_k, m_i, m_u, ref.c * ref_i * ref_u


def total_effect(model, ref: CausalReference, u, i):
    """Y(u, i, K(u, i)) - Y(u*, i*, K(u*, i*))."""
    y_k, m_i, m_u, muted = _parts(model, ref, u, i)
    return y_k * m_i * m_u - muted


def natural_direct_effect(model, ref: CausalReference, u, i):
    """Y(u, i, K(u*, i*)) - Y(u*, i*, K(u*, i*))."""
    _, m_i, m_u, muted = _parts(model, ref, u, i)
    return ref.c * m_i * m_u - muted


def total_indirect_effect(model, ref: CausalReference, u, i):
    """Y(u, i, K(u, i)) - Y(u, i, K(u*, i*)), in the counterfactual-score form."""
    y_k, m_i, m_u, _ = _parts(model, ref, u, i)
    return (y_k - ref.c) * m_i * m_u
