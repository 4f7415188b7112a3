"""Acceptance criteria, one test each.

Criteria 1-3 and 10 run on generated data. Criteria 4-9 need the Adressa
interaction log (``user<TAB>item`` lines) at ``$MACR_ADRESSA``; without it
they fail with the reason. ``$MACR_ACCEPTANCE_EPOCHS`` (default 1000) sets
the training length for those runs; the value is part of the reported line.
"""

import math
import os
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from conftest import random_batch, record_criterion
from macr.backbone import BackboneKind, NormalizedAdjacency
from macr.cli import main
from macr.dataset import SplitSpec, build_debiased_split, item_popularity, load_interactions
from macr.evaluation import (analyze_branch_activation, analyze_recommendation_frequency, evaluate,
                             hr_at_k, ndcg_at_k, rank_all_items, recall_at_k)
from macr.experiments import run_variant
from macr.model import (CausalReference, MacrModel, counterfactual_score, natural_direct_effect, total_effect,
                        total_indirect_effect)
from macr.trainer import LossContext, TrainConfig, build_model, finite_difference_check


def check(number, passed, detail):
    record_criterion(number, bool(passed), detail)
    assert passed, detail


# --- 1. gradient suite -------------------------------------------------------

class _Graph:
    n_users, n_items = 6, 7
    users = np.array([0, 0, 1, 2, 3, 4, 5, 5, 1])
    items = np.array([0, 1, 2, 3, 4, 5, 6, 0, 6])

    @staticmethod
    def item_degrees():
        return np.bincount(_Graph.items, minlength=7)


def test_criterion_01_gradients():
    start = time.perf_counter()
    worst = {}
    for backbone in ("MF", "LightGCN"):
        for head in ("affine", "mlp"):
            for seed in range(20):
                cfg = TrainConfig(backbone=backbone, head=head, embedding_dim=8, alpha=0.3, beta=0.2,
                                  l2_coeff=1e-2, rng_seed=seed)
                m = build_model(cfg, _Graph.n_users, _Graph.n_items, _Graph)
                rng = np.random.default_rng(seed)
                for v in m.params.values():
                    v[...] = rng.normal(scale=0.8, size=v.shape)
                m.touch()
                batch = random_batch(rng, _Graph.n_users, _Graph.n_items, duplicate=True)
                rep = finite_difference_check(m, batch, cfg, tolerance=1e-3, ctx=LossContext())
                key = f"{backbone}/{head}"
                worst[key] = max(worst.get(key, 0.0), rep.max_rel_error)
    elapsed = time.perf_counter() - start
    ok = all(v < 1e-3 for v in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items())
    check(1, ok, f"{detail}; 80 models, d=8, {elapsed:.1f}s")


# --- 2. causal identities ----------------------------------------------------

def test_criterion_02_causal_identities():
    start = time.perf_counter()
    worst, exact = 0.0, True
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        n_u, n_i, d = int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 6))
        backbone = BackboneKind.parse("LightGCN" if seed % 2 else "MF")
        u, i = np.nonzero(rng.random((n_u, n_i)) < 0.5)
        adj = NormalizedAdjacency.from_edges(n_u, n_i, u, i)
        m = MacrModel(n_u, n_i, d, backbone, head_kind=("affine", "mlp")[seed % 3 == 0],
                      adjacency=adj, rng_seed=seed)
        for v in m.params.values():
            v[...] = rng.normal(scale=2.0, size=v.shape)
        m.touch()
        ref = CausalReference.from_model(m)
        uu, ii = int(rng.integers(n_u)), int(rng.integers(n_i))
        te = total_effect(m, ref, uu, ii)
        nde = natural_direct_effect(m, ref, uu, ii)
        tie = total_indirect_effect(m, ref, uu, ii)
        worst = max(worst, abs(te - nde - tie))
        cf = counterfactual_score(m.match_score(uu, ii), m.item_branch(np.array([ii]))[0],
                                  m.user_branch(np.array([uu]))[0], ref.c)
        exact &= cf == tie
    elapsed = time.perf_counter() - start
    check(2, worst <= 1e-12 and exact,
          f"max |TE-NDE-TIE| {worst:.1e}, counterfactual == TIE exactly: {exact}; 1000 models, {elapsed:.1f}s")


# --- 3. metric oracles -------------------------------------------------------

class _Scores:
    def __init__(self, s):
        self.s, self.n_items = s, s.shape[1]

    def propagate(self):
        pass

    def score_matrix(self, users, c=None):
        return self.s[users]


def _from_definition(scores, excluded, truth, k):
    hr, rec, ndcg = [], [], []
    for u in sorted(truth):
        order = sorted((i for i in range(scores.shape[1]) if i not in excluded[u]), key=lambda i: (-scores[u, i], i))
        top = order[:k]
        hits = [i in truth[u] for i in top]
        hr.append(float(any(hits)))
        rec.append(sum(hits) / len(truth[u]))
        ideal = sum(1 / math.log2(r + 2) for r in range(min(k, len(truth[u]))))
        ndcg.append(sum(1 / math.log2(r + 2) for r, h in enumerate(hits) if h) / ideal)
    return float(np.mean(hr)), float(np.mean(rec)), float(np.mean(ndcg))


def test_criterion_03_metric_oracles():
    mismatches, done, seed = 0, 0, 0
    while done < 200:
        rng = np.random.default_rng(10_000 + seed)
        seed += 1
        n_u, n_i = int(rng.integers(1, 11)), int(rng.integers(2, 11))
        scores = rng.integers(-2, 3, size=(n_u, n_i)).astype(float)
        excluded, truth = [], {}
        for u in range(n_u):
            perm = rng.permutation(n_i).tolist()
            n_ex = int(rng.integers(0, n_i))
            excluded.append(set(perm[:n_ex]))
            n_t = int(rng.integers(0, n_i - n_ex + 1))
            if n_t:
                truth[u] = set(perm[n_ex:n_ex + n_t])
        if not truth:
            continue
        k = int(rng.integers(1, 11))
        res = rank_all_items(_Scores(scores), np.arange(n_u), excluded, k)
        got = (hr_at_k(res, truth, k), recall_at_k(res, truth, k), ndcg_at_k(res, truth, k))
        mismatches += got != _from_definition(scores, excluded, truth, k)
        done += 1
    check(3, mismatches == 0, f"{mismatches} mismatches against from-definition metrics on 200 instances")


# --- 4-9. Adressa ------------------------------------------------------------

EPOCHS = int(os.environ.get("MACR_ACCEPTANCE_EPOCHS", "1000"))
_RUNS = {}


def _adressa_split(number):
    path = os.environ.get("MACR_ADRESSA", "")
    if not path or not os.path.isfile(path):
        reason = f"Adressa log unavailable (MACR_ADRESSA={path or 'unset'}); criterion not evaluated"
        record_criterion(number, False, reason)
        pytest.fail(reason)
    if "split" not in _RUNS:
        data, ids = load_interactions(path)
        _RUNS["split"] = build_debiased_split(data, SplitSpec(0.1, 0.1, 2021), ids)
    return _RUNS["split"]


def _variant(split, name):
    if name not in _RUNS:
        _RUNS[name] = run_variant(name, split, TrainConfig(epochs=EPOCHS), ks=(20,))
    return _RUNS[name]


def _hr(res):
    return res.metrics.hr[20]


def _triple(res):
    return res.metrics.hr[20], res.metrics.recall[20], res.metrics.ndcg[20]


@pytest.mark.adressa
@pytest.mark.slow
def test_criterion_04_backbone_reproduction():
    split = _adressa_split(4)
    r = {n: _variant(split, n) for n in ("MF", "MACR_MF", "LightGCN", "MACR_LightGCN")}
    targets = {"MF": 0.111, "MACR_MF": 0.140, "LightGCN": 0.123, "MACR_LightGCN": 0.158}
    in_band = all(abs(_hr(r[n]) - t) <= 0.02 for n, t in targets.items())
    beats = all(a > b for a, b in zip(_triple(r["MACR_MF"]), _triple(r["MF"]))) and \
        all(a > b for a, b in zip(_triple(r["MACR_LightGCN"]), _triple(r["LightGCN"])))
    detail = ", ".join(f"{n} HR@20 {_hr(r[n]):.4f} (target {t})" for n, t in targets.items())
    check(4, in_band and beats, f"{detail}; MACR wins on all three metrics: {beats}; {EPOCHS} epochs, fixed length")


@pytest.mark.adressa
@pytest.mark.slow
def test_criterion_05_baseline_ordering():
    split = _adressa_split(5)
    r = {n: _hr(_variant(split, n)) for n in ("MF", "MACR_MF", "BS_MF", "IPW_MF")}
    ok = (r["MACR_MF"] > r["IPW_MF"] > r["MF"] and r["MACR_MF"] > r["BS_MF"]
          and abs(r["BS_MF"] - 0.113) <= 0.02 and abs(r["IPW_MF"] - 0.128) <= 0.02)
    check(5, ok, ", ".join(f"{n} {v:.4f}" for n, v in r.items()) + f"; {EPOCHS} epochs")


@pytest.mark.adressa
@pytest.mark.slow
def test_criterion_06_c_sweep_shape():
    split = _adressa_split(6)
    res = _variant(split, "MACR_MF")
    grid = [float(c) for c in range(20, 41, 2)]
    hr = [evaluate(res.model, split, [20], mode="TIE", c=c)[0].hr[20] for c in grid]
    best = int(np.argmax(hr))
    ok = hr[best] > hr[0] and hr[best] > hr[-1]
    check(6, ok, f"test HR@20 over c=20..40: {', '.join(f'{v:.4f}' for v in hr)}; argmax c={grid[best]:g}")


@pytest.mark.adressa
@pytest.mark.slow
def test_criterion_07_recommendation_frequency():
    split = _adressa_split(7)
    prof = item_popularity(split.train)
    f_mf = analyze_recommendation_frequency(_variant(split, "MF").ranking, prof).values()
    f_macr = analyze_recommendation_frequency(_variant(split, "MACR_MF").ranking, prof).values()
    ok = f_macr[-1] < f_mf[-1] and f_macr[0] > f_mf[0]
    check(7, ok, f"top group MF {f_mf[-1]:.2f} vs MACR {f_macr[-1]:.2f}; "
                 f"bottom group MF {f_mf[0]:.3f} vs MACR {f_macr[0]:.3f}")


@pytest.mark.adressa
@pytest.mark.slow
def test_criterion_08_branch_activation():
    split = _adressa_split(8)
    m = _variant(split, "MACR_MF").model
    rho = {}
    for side, counts in (("user", split.train.user_degrees()), ("item", split.train.item_degrees())):
        ga = analyze_branch_activation(m, side, counts)
        lower = [r["lower"] for r in ga.rows]
        rho[side] = spearmanr(lower, ga.values())[0]
    check(8, rho["user"] > 0.5 and rho["item"] > 0.5,
          f"Spearman rho user {rho['user']:.3f}, item {rho['item']:.3f}")


@pytest.mark.adressa
@pytest.mark.slow
def test_criterion_09_ablations():
    split = _adressa_split(9)
    full = _hr(_variant(split, "MACR_MF"))
    ab = {a: _hr(_variant(split, f"MACR_MF__{a}")) for a in ("no_user_branch", "no_item_branch", "no_l_u", "no_l_i")}
    ok = (all(full >= v for v in ab.values()) and ab["no_item_branch"] < ab["no_user_branch"]
          and abs(ab["no_item_branch"] - 0.116) <= 0.02 and abs(ab["no_user_branch"] - 0.137) <= 0.02)
    check(9, ok, f"full {full:.4f}; " + ", ".join(f"{k} {v:.4f}" for k, v in ab.items()))


# --- 10. determinism ---------------------------------------------------------

def _pipeline(root, log):
    opts = ["--out-dir", str(root), "--epochs", "3", "--embedding-dim", "16", "--batch-size", "512",
            "--c-grid", "0,2,4", "--ks", "5,20"]
    for cmd in (["split", "--data", str(log)], ["train"], ["tune-c"], ["evaluate"], ["evaluate", "--mode", "te"],
                ["analyze"]):
        assert main([*cmd, *opts]) == 0, cmd


def test_criterion_10_determinism(tmp_path):
    log = tmp_path / "log.tsv"
    assert main(["synth", str(log), "--users", "400", "--items", "80", "--seed", "5"]) == 0
    _pipeline(tmp_path / "a", log)
    _pipeline(tmp_path / "b", log)
    files = ["split/train.tsv", "split/valid.tsv", "split/test.tsv", "split/meta.jsonl", "split/id_map.json",
             "checkpoint.bin", "c_sweep.csv", "metrics_tie.csv", "metrics_te.csv", "metrics_tie.json",
             "train_log.jsonl", "analysis/recommendation_frequency.csv", "analysis/item_branch.csv"]
    differ = [f for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    check(10, not differ, f"{len(files)} artifacts compared byte-for-byte; differing: {differ or 'none'}")
