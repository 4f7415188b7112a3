"""Mini-batch training with analytic gradients and a row-sparse Adam."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .backbone import BackboneKind, NormalizedAdjacency, lightgcn_propagate
from .baselines import PropensityWeights, popularity_norm, reg_penalty, reg_penalty_grad
from .dataset import sample_negatives
from .evaluation import evaluate
from .model import MacrModel, bce_loss, head_backward, head_forward, sigmoid

log = logging.getLogger(__name__)

DEFAULT_C_GRID = tuple(float(c) for c in range(20, 41, 2))


class NumericalError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    model: str = "macr"  # plain | macr | bs | ipw | reg
    backbone: str = "MF"  # MF | LightGCN
    layers: int = 2
    head: str = "affine"
    branch_input: str = "layer0"
    alpha: float = 1e-3
    beta: float = 1e-3
    learning_rate: float = 1e-3
    batch_size: int = 1024
    epochs: int = 1000
    l2_coeff: float = 1e-5
    embedding_dim: int = 64
    neg_ratio: int = 1
    rng_seed: int = 2021
    c_grid: tuple = DEFAULT_C_GRID
    no_user_branch: bool = False
    no_item_branch: bool = False
    no_l_u: bool = False
    no_l_i: bool = False
    ipw_smoothing: float = 1.0
    ipw_clip_quantile: float = 0.95
    reg_coeff: float = 1e-4
    eval_every: int = 0
    eval_k: int = 20
    eval_metric: str = "HR"
    select_best: bool = False

    def __post_init__(self):
        self.c_grid = tuple(float(c) for c in self.c_grid)
        bad = [f.name for f in fields(self)
               if f.name in ("learning_rate", "batch_size", "embedding_dim", "neg_ratio")
               and not getattr(self, f.name) > 0]
        if bad:
            raise ValueError(f"must be positive: {', '.join(bad)}")
        if min(self.alpha, self.beta, self.l2_coeff, self.epochs) < 0:
            raise ValueError("alpha, beta, l2_coeff and epochs must be non-negative")
        if not self.c_grid:
            raise ValueError("c_grid must be non-empty")
        BackboneKind.parse(self.backbone, self.layers)

    @property
    def effective_alpha(self):
        return 0.0 if self.no_l_i else self.alpha

    @property
    def effective_beta(self):
        return 0.0 if self.no_l_u else self.beta

    def to_dict(self):
        d = asdict(self)
        d["c_grid"] = list(self.c_grid)
        return d


def build_model(cfg: TrainConfig, n_users, n_items, train=None):
    kind = BackboneKind.parse(cfg.backbone, cfg.layers)
    adj = NormalizedAdjacency.from_dataset(train) if kind.variant == "LightGCN" else None
    return MacrModel(n_users, n_items, cfg.embedding_dim, kind, cfg.model, cfg.head, adj,
                     use_user_branch=not cfg.no_user_branch, use_item_branch=not cfg.no_item_branch,
                     branch_input=cfg.branch_input, rng_seed=cfg.rng_seed)


@dataclass
class LossContext:
    """Per-item quantities some objectives need, fitted on train."""

    propensity: PropensityWeights | None = None
    pop_norm: np.ndarray | None = None

    @classmethod
    def for_model(cls, model, train, cfg):
        if model.kind == "ipw":
            return cls(propensity=PropensityWeights.fit(train.item_degrees(), cfg.ipw_smoothing, cfg.ipw_clip_quantile))
        if model.kind == "reg":
            return cls(pop_norm=popularity_norm(train.item_degrees()))
        return cls()


@dataclass
class SparseGrad:
    """Gradient rows for an embedding-like table."""

    rows: np.ndarray
    values: np.ndarray


def _row_keys(model):
    return [k for k in ("user_emb", "item_emb", "item_bias") if k in model.params]


def _touched(model, batch):
    users = np.unique(batch.users)
    items = np.unique(batch.items)
    return {"user_emb": users, "item_emb": items, "item_bias": items}


def objective(model, batch, cfg, ctx=None, snapshot=None, allow_stale=False):
    """Data loss plus L2 on the touched rows and on the head parameters.

    The L2 sum is divided by the batch size so that, with batch-mean data
    losses, its weight relative to the data term matches a summed objective.
    Returns ``(total, parts)``; parts carries L_O, L_I, L_U and L2.
    """
    ctx = ctx or LossContext()
    kw = {"snapshot": snapshot, "allow_stale": allow_stale}
    parts = {"L_O": 0.0, "L_I": 0.0, "L_U": 0.0}
    if model.kind == "macr":
        y_k = model.match_scores(batch.users, batch.items, **kw)
        y_i = model.item_branch(batch.items, **kw)
        y_u = model.user_branch(batch.users, **kw)
        m_i = sigmoid(y_i) if model.use_item_branch else 1.0
        m_u = sigmoid(y_u) if model.use_user_branch else 1.0
        parts["L_O"] = bce_loss(y_k * m_i * m_u, batch.labels)
        if model.use_item_branch:
            parts["L_I"] = bce_loss(y_i, batch.labels)
        if model.use_user_branch:
            parts["L_U"] = bce_loss(y_u, batch.labels)
        data = parts["L_O"] + cfg.effective_alpha * parts["L_I"] + cfg.effective_beta * parts["L_U"]
    else:
        s = model.train_scores(batch.users, batch.items, **kw)
        w = ctx.propensity.for_batch(batch.items) if model.kind == "ipw" else None
        parts["L_O"] = bce_loss(s, batch.labels, w)
        data = parts["L_O"]
        if model.kind == "reg":
            parts["Reg"] = reg_penalty(s, batch.items, ctx.pop_norm, cfg.reg_coeff)
            data += parts["Reg"]
    l2 = 0.0
    for key, rows in _touched(model, batch).items():
        if key in model.params:
            l2 += float(np.sum(model.params[key][rows] ** 2))
    l2 += sum(float(np.sum(v**2)) for k, v in model.params.items() if "_head." in k)
    parts["L2"] = cfg.l2_coeff * l2 / len(batch)
    parts["total"] = data + parts["L2"]
    return parts["total"], parts


def _accumulate_rows(idx, vals, n_rows=None):
    rows, inv = np.unique(idx, return_inverse=True)
    out = np.zeros((len(rows),) + vals.shape[1:])
    np.add.at(out, inv, vals)
    if n_rows is None:
        return rows, out
    dense = np.zeros((n_rows,) + vals.shape[1:])
    dense[rows] = out
    return dense


def compute_gradients(model, batch, cfg, ctx=None, snapshot=None, allow_stale=False):
    """Analytic gradient of :func:`objective`.

    Returns ``(grads, parts)``. Embedding tables and the item bias get a
    :class:`SparseGrad`; under MF only rows in the batch appear, under
    LightGCN every row does (propagation spreads the signal).
    """
    ctx = ctx or LossContext()
    if len(batch) == 0:
        raise ValueError("empty batch")
    kw = {"snapshot": snapshot, "allow_stale": allow_stale}
    n = len(batch)
    users, items, y = batch.users, batch.items, batch.labels
    u_tab, i_tab = model._tables(snapshot, allow_stale)
    eu, ei = u_tab[users], i_tab[items]
    y_k = np.sum(eu * ei, axis=1)
    grads = {}
    head_in_u, head_in_i = model.branch_inputs(**kw)
    g_head_x = {}  # gradient w.r.t. head inputs, per side

    if model.kind == "macr":
        if model.use_item_branch:
            xi = head_in_i[items]
            y_i, cache_i = head_forward(model.head_kind, model.head_params("item"), xi)
            m_i = sigmoid(y_i)
        else:
            m_i = np.ones(n)
        if model.use_user_branch:
            xu = head_in_u[users]
            y_u, cache_u = head_forward(model.head_kind, model.head_params("user"), xu)
            m_u = sigmoid(y_u)
        else:
            m_u = np.ones(n)
        fused = y_k * m_i * m_u
        g_fused = (sigmoid(fused) - y) / n
        g_k = g_fused * m_i * m_u
        if model.use_item_branch:
            g_yi = g_fused * y_k * m_u * m_i * (1 - m_i) + cfg.effective_alpha * (m_i - y) / n
            hg, gx = head_backward(model.head_kind, model.head_params("item"), xi, cache_i, g_yi)
            grads.update({f"item_head.{k}": v for k, v in hg.items()})
            g_head_x["item"] = gx
        if model.use_user_branch:
            g_yu = g_fused * y_k * m_i * m_u * (1 - m_u) + cfg.effective_beta * (m_u - y) / n
            hg, gx = head_backward(model.head_kind, model.head_params("user"), xu, cache_u, g_yu)
            grads.update({f"user_head.{k}": v for k, v in hg.items()})
            g_head_x["user"] = gx
    else:
        s = y_k + model.params["item_bias"][items] if model.kind == "bs" else y_k
        g_s = sigmoid(s) - y
        if model.kind == "ipw":
            g_s = g_s * ctx.propensity.for_batch(items)
        g_s = g_s / n
        if model.kind == "reg":
            g_s = g_s + reg_penalty_grad(s, items, ctx.pop_norm, cfg.reg_coeff)
        g_k = g_s
        if model.kind == "bs":
            rows, vals = _accumulate_rows(items, g_s)
            grads["item_bias"] = SparseGrad(rows, vals)

    g_eu = g_k[:, None] * ei
    g_ei = g_k[:, None] * eu
    layer0 = {"user": [(users, g_eu)], "item": [(items, g_ei)]}
    head_reads_propagated = model.branch_input == "propagated" and model.backbone.variant == "LightGCN"

    if model.backbone.variant == "LightGCN":
        gu = _accumulate_rows(users, g_eu, model.n_users)
        gi = _accumulate_rows(items, g_ei, model.n_items)
        if head_reads_propagated:
            if "user" in g_head_x:
                gu += _accumulate_rows(users, g_head_x.pop("user"), model.n_users)
            if "item" in g_head_x:
                gi += _accumulate_rows(items, g_head_x.pop("item"), model.n_items)
        gu, gi = lightgcn_propagate(gu, gi, model.adjacency, model.backbone.layers)
        table_grads = {"user_emb": (np.arange(model.n_users), gu), "item_emb": (np.arange(model.n_items), gi)}
        if "user" in g_head_x:
            table_grads["user_emb"][1][:] += _accumulate_rows(users, g_head_x["user"], model.n_users)
        if "item" in g_head_x:
            table_grads["item_emb"][1][:] += _accumulate_rows(items, g_head_x["item"], model.n_items)
    else:
        if "user" in g_head_x:
            layer0["user"].append((users, g_head_x["user"]))
        if "item" in g_head_x:
            layer0["item"].append((items, g_head_x["item"]))
        table_grads = {}
        for side, key in (("user", "user_emb"), ("item", "item_emb")):
            idx = np.concatenate([a for a, _ in layer0[side]])
            vals = np.concatenate([b for _, b in layer0[side]])
            table_grads[key] = _accumulate_rows(idx, vals)

    touched = _touched(model, batch)
    l2 = 2 * cfg.l2_coeff / n
    for key, (rows, vals) in table_grads.items():
        reg_rows = touched[key]
        pos = np.searchsorted(rows, reg_rows)
        vals = vals.copy()
        vals[pos] += l2 * model.params[key][reg_rows]
        grads[key] = SparseGrad(rows, vals)
    if "item_bias" in grads:
        gb = grads["item_bias"]
        gb.values = gb.values + l2 * model.params["item_bias"][gb.rows]
    for k, v in model.params.items():
        if "_head." in k:
            grads[k] = grads[k] + l2 * v

    for k, g in grads.items():
        vals = g.values if isinstance(g, SparseGrad) else g
        if not np.all(np.isfinite(vals)):
            raise NumericalError(f"non-finite gradient in parameter block {k!r}")
    return grads


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, **kw):
        st = cls(**kw)
        st.first_moment = {k: np.zeros_like(v) for k, v in params.items()}
        st.second_moment = {k: np.zeros_like(v) for k, v in params.items()}
        return st


def adam_step(params, grads, state: AdamState, lr):
    """One bias-corrected Adam update, in place.

    Sparse gradients update only their rows' moments and values (lazy Adam),
    so rows outside the batch stay bit-identical.
    """
    state.step_count += 1
    t = state.step_count
    corr1 = 1 - state.beta1**t
    corr2 = 1 - state.beta2**t
    for k, g in grads.items():
        p, m, v = params[k], state.first_moment[k], state.second_moment[k]
        if isinstance(g, SparseGrad):
            rows, gv = g.rows, g.values
            if gv.shape[1:] != p.shape[1:]:
                raise ValueError(f"shape mismatch for {k!r}")
            m[rows] = state.beta1 * m[rows] + (1 - state.beta1) * gv
            v[rows] = state.beta2 * v[rows] + (1 - state.beta2) * gv * gv
            p[rows] -= lr * (m[rows] / corr1) / (np.sqrt(v[rows] / corr2) + state.epsilon)
        else:
            if g.shape != p.shape:
                raise ValueError(f"shape mismatch for {k!r}: {g.shape} vs {p.shape}")
            m *= state.beta1
            m += (1 - state.beta1) * g
            v *= state.beta2
            v += (1 - state.beta2) * g * g
            p -= lr * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
    return params, state


# --- finite differences ----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    n_checked: int
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def dense_gradient(grads, params):
    out = {}
    for k, p in params.items():
        g = grads.get(k)
        d = np.zeros_like(p)
        if isinstance(g, SparseGrad):
            np.add.at(d, g.rows, g.values)
        elif g is not None:
            d += g
        out[k] = d
    return out


def finite_difference_check(model, batch, cfg, h=1e-4, tolerance=1e-3, abs_floor=1e-6,
                            ctx=None, grads=None):
    """Compare analytic gradients to central differences on every parameter.

    The relative error per entry is ``|a - n| / max(|a|, |n|, abs_floor)``.
    ``grads`` may be supplied to check a gradient other than the model's own.
    """
    if grads is None:
        grads = compute_gradients(model, batch, cfg, ctx)
    analytic = dense_gradient(grads, model.params)
    worst, worst_key, count = 0.0, "", 0
    for key, p in model.params.items():
        flat = p.reshape(-1)
        a_flat = analytic[key].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            model.touch()
            f_plus = objective(model, batch, cfg, ctx)[0]
            flat[j] = orig - h
            model.touch()
            f_minus = objective(model, batch, cfg, ctx)[0]
            flat[j] = orig
            model.touch()
            num = (f_plus - f_minus) / (2 * h)
            err = abs(a_flat[j] - num) / max(abs(a_flat[j]), abs(num), abs_floor)
            count += 1
            if err > worst:
                worst, worst_key = err, f"{key}[{j}]"
    return GradCheckReport(worst, worst_key, count, tolerance)


# --- training --------------------------------------------------------------

@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # per-epoch dicts
    wall_clock: float = 0.0
    chosen_c: float | None = None
    best_epoch: int | None = None

    def write_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.epochs:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _validation_metric(model, split, cfg):
    """Valid metric at ``eval_k``; MACR models report their best c on the grid."""
    if model.kind == "macr":
        c, _ = tune_reference_c(model, split, cfg)
        rep, _ = evaluate(model, split, [cfg.eval_k], mode="TIE", c=c, on="valid")
    else:
        rep, _ = evaluate(model, split, [cfg.eval_k], on="valid")
    return _pick(rep, cfg.eval_metric, cfg.eval_k)


def _pick(report, metric, k):
    return {"HR": report.hr, "Recall": report.recall, "NDCG": report.ndcg}[metric][k]


def train(model: MacrModel, split, cfg: TrainConfig, progress=None):
    """Run ``cfg.epochs`` epochs of negative resampling and Adam steps.

    LightGCN propagation is refreshed once per epoch; within the epoch the
    matching scores use that snapshot while gradients flow through the
    (constant) propagation map. Deterministic for a fixed seed.
    """
    start = time.perf_counter()
    ctx = LossContext.for_model(model, split.train, cfg)
    state = AdamState.for_params(model.params)
    rng = np.random.default_rng([cfg.rng_seed, 1])
    report = TrainReport()
    best = (-np.inf, None)
    for epoch in range(cfg.epochs):
        data = sample_negatives(split.train, cfg.neg_ratio, rng)
        perm = rng.permutation(len(data))
        snapshot = model.propagation_snapshot() if model.backbone.variant == "LightGCN" else None
        sums = {}
        n_batches = 0
        for b, start_idx in enumerate(range(0, len(perm), cfg.batch_size)):
            batch = data.take(perm[start_idx:start_idx + cfg.batch_size])
            _, parts = objective(model, batch, cfg, ctx, snapshot, allow_stale=True)
            if not np.isfinite(parts["total"]):
                raise NumericalError(f"loss diverged at epoch {epoch}, batch {b}")
            grads = compute_gradients(model, batch, cfg, ctx, snapshot, allow_stale=True)
            adam_step(model.params, grads, state, cfg.learning_rate)
            model.touch()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        rec = {"epoch": epoch + 1}
        rec.update({k: v / n_batches for k, v in sums.items()})
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0 and len(split.valid):
            metric = _validation_metric(model, split, cfg)
            rec["valid_metric"] = metric
            if cfg.select_best and metric > best[0]:
                best = (metric, (epoch + 1, {k: v.copy() for k, v in model.params.items()}))
        report.epochs.append(rec)
        if progress:
            progress(rec)
        log.debug("epoch %d %s", epoch + 1, rec)
    if cfg.select_best and best[1] is not None:
        report.best_epoch, saved = best[1]
        for k, v in saved.items():
            model.params[k][...] = v
        model.touch()
    report.wall_clock = time.perf_counter() - start
    return model, report


def tune_reference_c(model, split, cfg, metric=None, k=None):
    """Sweep ``cfg.c_grid`` on the validation set with counterfactual ranking.

    Returns ``(best_c, rows)``; ties go to the smaller c.
    """
    metric = metric or cfg.eval_metric
    k = k or cfg.eval_k
    rows = []
    for c in sorted(cfg.c_grid):
        rep, _ = evaluate(model, split, [k], mode="TIE", c=c, on="valid")
        rows.append({"c": c, "K": k, "HR": rep.hr[k], "Recall": rep.recall[k], "NDCG": rep.ndcg[k]})
    best = max(rows, key=lambda r: (r[metric], -r["c"]))
    return best["c"], rows
