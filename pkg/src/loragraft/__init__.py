"""Transplant LoRA adapters across same-family model upgrades.

The pipeline aligns an old model and its upgraded successor layer by
layer (activation similarity + dynamic programming), head by head
(interaction matrices + Hungarian assignment), and dimension by
dimension (embedding-derived transfer matrices), then rewrites each
low-rank weight update into the new model's coordinates and
re-factorizes it, producing an adapter the new model can load directly.
"""

from .cka import (SIMILARITY_MARGIN, SimilarityMatrix, hsic1,
                  layer_similarity_matrix, minibatch_cka,
                  read_similarity_csv, write_similarity_csv)
from .errors import DataError, LoraGraftError, NumericError
from .headmap import (HeadAssignment, HeadInteraction, group_average_kv,
                      head_interactions, head_similarity, hungarian,
                      identity_assignment, match_heads, replicate_kv_heads,
                      split_heads)
from .layermap import LayerMapping, dp_layer_mapping, orient_and_map
from .linalg import LowRankPair, flat_cosine, gram, pinv, truncated_svd
from .tensorio import (ActivationSet, AdapterBundle, ModelSpec, ModelWeights,
                       load_activations, load_adapter, load_manifest,
                       load_model, load_vocab, read_archive, save_activations,
                       save_adapter, save_manifest, save_model, save_vocab,
                       write_archive)
from .toyforge import (SCENARIO_KINDS, GroundTruth, Scenario, capture_pair,
                       forward_capture, gen_scenario)
from .transfer import (TransferMatrices, VocabAlignment, hidden_transform,
                       identity_transfer, intermediate_transform,
                       vocab_intersection)
from .transplant import (LftSettings, MappingPlan, TransplantConfig,
                         build_plan, emit_lft_config, hidden_map,
                         transform_head_update, transform_mlp_update,
                         transplant_adapter)

__version__ = "0.1.0"

__all__ = [
    "ActivationSet", "AdapterBundle", "DataError", "GroundTruth",
    "HeadAssignment", "HeadInteraction", "LayerMapping", "LftSettings",
    "LoraGraftError", "LowRankPair", "MappingPlan", "ModelSpec",
    "ModelWeights", "NumericError", "SCENARIO_KINDS", "SIMILARITY_MARGIN",
    "Scenario", "SimilarityMatrix", "TransferMatrices", "TransplantConfig",
    "VocabAlignment", "build_plan", "capture_pair", "dp_layer_mapping",
    "emit_lft_config", "flat_cosine", "forward_capture", "gen_scenario",
    "gram", "group_average_kv", "head_interactions", "head_similarity",
    "hidden_map", "hidden_transform", "hsic1", "hungarian",
    "identity_assignment", "identity_transfer", "intermediate_transform",
    "layer_similarity_matrix", "load_activations", "load_adapter",
    "load_manifest", "load_model", "load_vocab", "match_heads",
    "minibatch_cka", "orient_and_map", "pinv", "read_archive",
    "read_similarity_csv", "replicate_kv_heads", "save_activations",
    "save_adapter", "save_manifest", "save_model", "save_vocab",
    "split_heads", "transform_head_update", "transform_mlp_update",
    "transplant_adapter", "truncated_svd", "vocab_intersection",
    "write_archive", "write_similarity_csv",
]
