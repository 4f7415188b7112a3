"""Popularity debiasing for collaborative filtering via counterfactual reasoning.

A matching backbone (MF or LightGCN) is trained jointly with a user branch
and an item branch; at inference the item's direct effect is subtracted so
items are ranked by their matching-mediated effect.
"""

from .backbone import BackboneKind, NormalizedAdjacency, lightgcn_propagate, mf_match_score, xavier_init
from .dataset import (DatasetSplit, InteractionDataset, SplitSpec, build_debiased_split, item_popularity,
                      load_interactions, sample_negatives)
from .evaluation import evaluate, hr_at_k, ndcg_at_k, rank_all_items, recall_at_k
from .model import (CausalReference, MacrModel, bce_loss, counterfactual_score, fuse_scores, macr_loss,
                    natural_direct_effect, total_effect, total_indirect_effect)
from .trainer import TrainConfig, build_model, train, tune_reference_c

__version__ = "0.1.0"
