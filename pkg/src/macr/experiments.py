"""Named model variants and end-to-end runs used by the CLI and the benchmarks."""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field

from .evaluation import evaluate
from .trainer import TrainConfig, build_model, train, tune_reference_c

ABLATIONS = {
    "no_user_branch": "w/o user branch",
    "no_item_branch": "w/o item branch",
    "no_l_i": "w/o L_I",
    "no_l_u": "w/o L_U",
}
_PREFIX = {"": "plain", "MACR": "macr", "BS": "bs", "IPW": "ipw", "Reg": "reg"}
_NAME = re.compile(r"^(?:(MACR|BS|IPW|Reg)_)?(MF|LightGCN)(?:__(\w+))?$")


def variant_config(name, base: TrainConfig) -> TrainConfig:
    """Map a row label such as ``MACR_MF`` or ``MACR_MF__no_item_branch`` to a config."""
    m = _NAME.match(name)
    if not m:
        raise ValueError(f"unknown variant {name!r}")
    prefix, backbone, ablation = m.group(1) or "", m.group(2), m.group(3)
    changes = {"model": _PREFIX[prefix], "backbone": backbone}
    if ablation:
        if ablation not in ABLATIONS or prefix != "MACR":
            raise ValueError(f"unknown ablation {ablation!r} for {name!r}")
        changes[ablation] = True
    return dataclasses.replace(base, **changes)


@dataclass
class VariantResult:
    name: str
    model: object
    report: object
    metrics: object
    ranking: object
    c: float | None = None
    sweep: list = field(default_factory=list)

    def summary(self, k=20):
        return {"variant": self.name, "HR": self.metrics.hr[k], "Recall": self.metrics.recall[k],
                "NDCG": self.metrics.ndcg[k], "c": self.c, "epochs": len(self.report.epochs)}


def run_variant(name, split, base: TrainConfig, ks=(20,), progress=None) -> VariantResult:
    """Train one variant, tune c on valid for MACR models, then score test."""
    cfg = variant_config(name, base)
    model = build_model(cfg, split.n_users, split.n_items, split.train)
    model, report = train(model, split, cfg, progress=progress)
    c, sweep = None, []
    if model.kind == "macr":
        c, sweep = tune_reference_c(model, split, cfg)
        metrics, ranking = evaluate(model, split, ks, mode="TIE", c=c)
    else:
        metrics, ranking = evaluate(model, split, ks)
    report.chosen_c = c
    return VariantResult(name, model, report, metrics, ranking, c, sweep)
