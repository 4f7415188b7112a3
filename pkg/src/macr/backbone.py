"""Matching backbones: plain MF and LightGCN propagation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


def xavier_init(rows, dim, rng_seed=None):
    """Glorot-uniform table: U(-a, a) with a = sqrt(6 / (rows + dim))."""
    if rows < 1 or dim < 1:
        raise ValueError("rows and dim must be >= 1")
    rng = np.random.default_rng(rng_seed)
    bound = np.sqrt(6.0 / (rows + dim))
    return rng.uniform(-bound, bound, size=(rows, dim))


def mf_match_score(e_u, e_i):
    e_u = np.asarray(e_u, dtype=float)
    e_i = np.asarray(e_i, dtype=float)
    if e_u.shape[-1] != e_i.shape[-1]:
        raise ValueError(f"dimension mismatch: {e_u.shape[-1]} vs {e_i.shape[-1]}")
    return np.sum(e_u * e_i, axis=-1)


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """User-item graph with symmetric weights 1/sqrt(deg_u * deg_i) per edge.

    ``matrix`` is the n_users x n_items CSR block of the bipartite operator;
    its transpose is the item-to-user block. No self loops.
    """

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    degree_u: np.ndarray
    degree_i: np.ndarray
    weights: np.ndarray
    matrix: sp.csr_matrix
    matrix_t: sp.csr_matrix

    @classmethod
    def from_edges(cls, n_users, n_items, users, items):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        du = np.bincount(users, minlength=n_users)
        di = np.bincount(items, minlength=n_items)
        w = 1.0 / np.sqrt(du[users].astype(float) * di[items].astype(float))
        mat = sp.csr_matrix((w, (users, items)), shape=(n_users, n_items))
        return cls(n_users, n_items, users, items, du, di, w, mat, mat.T.tocsr())

    @classmethod
    def from_dataset(cls, data):
        return cls.from_edges(data.n_users, data.n_items, data.users, data.items)

    def dense(self):
        """Full (n_users + n_items) square operator, for small-graph checks."""
        n = self.n_users + self.n_items
        out = np.zeros((n, n))
        out[self.users, self.n_users + self.items] = self.weights
        out[self.n_users + self.items, self.users] = self.weights
        return out


def lightgcn_propagate(user_emb, item_emb, adj: NormalizedAdjacency, layers):
    """Mean over layers 0..layers of the normalized neighbourhood sums.

    The map is linear and self-adjoint, so the same call also pulls gradients
    from the output tables back to the layer-0 tables.
    """
    if layers < 0:
        raise ValueError("layers must be >= 0")
    if user_emb.shape[0] != adj.n_users or item_emb.shape[0] != adj.n_items:
        raise ValueError("embedding tables do not match the adjacency shape")
    acc_u = np.array(user_emb, dtype=float)
    acc_i = np.array(item_emb, dtype=float)
    cur_u, cur_i = acc_u.copy(), acc_i.copy()
    for _ in range(layers):
        cur_u, cur_i = adj.matrix @ cur_i, adj.matrix_t @ cur_u
        acc_u += cur_u
        acc_i += cur_i
    return acc_u / (layers + 1), acc_i / (layers + 1)


@dataclass(frozen=True)
class BackboneKind:
    variant: str = "MF"
    layers: int = 0

    def __post_init__(self):
        if self.variant not in ("MF", "LightGCN"):
            raise ValueError(f"unknown backbone {self.variant!r}")
        if self.variant == "LightGCN" and self.layers < 1:
            raise ValueError("LightGCN needs layers >= 1")

    @classmethod
    def parse(cls, name, layers=2):
        if name.lower() == "mf":
            return cls("MF", 0)
        if name.lower() == "lightgcn":
            return cls("LightGCN", layers)
        raise ValueError(f"unknown backbone {name!r}")

    @property
    def n_layers(self):
        return self.layers if self.variant == "LightGCN" else 0
