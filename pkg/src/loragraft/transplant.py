"""Plan construction and the adapter transplant itself.

A MappingPlan bundles everything the rewrite needs: the layer pairing,
one head assignment per mapped pair, the hidden-space map, and the
output rank/alpha/LFT settings. transplant_adapter then rewrites each
adapter entry into the new model's spaces:

    per assigned head pair (h_old, h_new), for q/k/v:
        dW_new = W_h^T dW_old^h W_old^h^T W_h W_new^h
    o-projection: the same product applied to transposed head row-blocks
    MLP up:   W_h^T dW W_i_up      down: W_i_down^T dW W_h

where W_i_up / W_i_down chain the mapped pair's own MLP projections
through W_h. Updates land at the assigned new-head block positions,
K/V blocks are averaged back to the new model's kv-group granularity,
and each assembled matrix is re-factorized at the plan rank with the
truncated SVD. When the two embeddings are bit-identical the hidden
basis is certifiably unchanged and the W_h factors drop out.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cka import SimilarityMatrix, layer_similarity_matrix
from .errors import DataError
from .headmap import (HeadAssignment, group_average_kv, head_interactions,
                      head_similarity, identity_assignment, match_heads,
                      replicate_kv_heads, split_heads)
from .layermap import LayerMapping, orient_and_map
from .linalg import truncated_svd
from .tensorio import ATTN_MODULES, AdapterBundle, ModelWeights
from .transfer import (TransferMatrices, VocabAlignment, hidden_transform,
                       intermediate_transform, vocab_intersection)


@dataclass
class LftSettings:
    """Hyperparameters emitted for the optional fine-tuning pass."""

    learning_rate: float = 1e-3
    warmup: int = 0
    epochs: int = 3
    batch_size: int = 16
    scheduler: str = "linear"

    def validate(self) -> "LftSettings":
        if self.learning_rate <= 0:
            raise DataError(f"lft learning_rate must be positive, got {self.learning_rate}")
        if self.warmup != 0:
            raise DataError(f"lft warmup must be 0, got {self.warmup}")
        if self.epochs < 1 or self.batch_size < 1:
            raise DataError("lft epochs and batch_size must be >= 1")
        if self.scheduler != "linear":
            raise DataError(f"lft scheduler must be linear, got {self.scheduler!r}")
        return self


@dataclass
class TransplantConfig:
    rank: int
    alpha: float
    lft: LftSettings = field(default_factory=LftSettings)

    def validate(self) -> "TransplantConfig":
        if self.rank < 1:
            raise DataError(f"transplant rank must be >= 1, got {self.rank}")
        if not np.isfinite(self.alpha):
            raise DataError("transplant alpha must be finite")
        self.lft.validate()
        return self


@dataclass
class MappingPlan:
    layer_mapping: LayerMapping
    head_assignments: dict[tuple[int, int], HeadAssignment]
    transfer: TransferMatrices
    config: TransplantConfig
    target_modules: tuple[str, ...] = ATTN_MODULES


def _check_adapter_fits(adapter: AdapterBundle, old: ModelWeights) -> None:
    spec = old.spec
    for (layer, module), (A, B) in adapter.entries.items():
        if layer >= spec.n_layers:
            raise DataError(
                f"adapter entry layers.{layer}.{module} exceeds old model depth {spec.n_layers}")
        d_in, d_out = spec.module_shape(module)
        if A.shape != (adapter.rank, d_in) or B.shape != (d_out, adapter.rank):
            raise DataError(
                f"adapter entry layers.{layer}.{module} shapes A{A.shape} B{B.shape} do not "
                f"fit module dims ({d_in}, {d_out}) at rank {adapter.rank}")


def hidden_map(old: ModelWeights, new: ModelWeights,
                vocab_old: list[str] | None,
                vocab_new: list[str] | None) -> np.ndarray:
    """W_h from the embeddings; exact identity when they are bit-identical."""
    E_old, E_new = old.embedding, new.embedding
    if E_old.shape == E_new.shape and np.array_equal(E_old, E_new):
        return np.eye(E_old.shape[1])
    if vocab_old is not None and vocab_new is not None:
        align = vocab_intersection(vocab_old, vocab_new)
    elif E_old.shape[0] == E_new.shape[0]:
        # no token lists: same vocab size is taken as row-aligned
        align = VocabAlignment(
            pairs=tuple((i, i) for i in range(E_old.shape[0])),
            shared_count=E_old.shape[0])
    else:
        raise DataError(
            "vocab sizes differ; token lists are required to align the embeddings")
    return hidden_transform(E_old, E_new, align)


def attention_at_query_granularity(model: ModelWeights, layer: int):
    s = model.spec
    w = model.layers[layer]
    K, V = replicate_kv_heads(w["k"], w["v"], s.n_kv_heads, s.n_heads)
    return w["q"], K, V, w["o"]


def build_plan(old: ModelWeights, new: ModelWeights, adapter: AdapterBundle,
               acts_old=None, acts_new=None, *,
               similarity: SimilarityMatrix | None = None,
               vocab_old: list[str] | None = None,
               vocab_new: list[str] | None = None,
               delta: int | None = None,
               rank: int | None = None,
               alpha: float | None = None,
               head_mapping: bool = True,
               lft: LftSettings | None = None) -> MappingPlan:
    """Chain transfer, layer alignment, and head alignment into a plan.

    Layer similarity comes from `similarity` when given, otherwise from
    the two activation sets. Head assignments are computed per mapped
    layer pair; with head_mapping=False every pair gets the identity
    assignment. Rank and alpha default to the adapter's own.
    """
    old.validate()
    new.validate()
    adapter.validate()
    _check_adapter_fits(adapter, old)
    if similarity is None:
        if acts_old is None or acts_new is None:
            raise DataError("build_plan needs either a similarity matrix or both activation sets")
        similarity = layer_similarity_matrix(acts_old, acts_new)
    similarity.validate()
    if similarity.S.shape != (old.spec.n_layers, new.spec.n_layers):
        raise DataError(
            f"similarity shape {similarity.S.shape} does not match layer counts "
            f"({old.spec.n_layers}, {new.spec.n_layers})")
    mapping = orient_and_map(similarity, delta)
    W_h = hidden_map(old, new, vocab_old, vocab_new)
    hidden_unchanged = W_h.shape[0] == W_h.shape[1] and np.array_equal(W_h, np.eye(W_h.shape[0]))

    assignments: dict[tuple[int, int], HeadAssignment] = {}
    for i, j in mapping.pairs:
        if head_mapping:
            old_int = head_interactions(*attention_at_query_granularity(old, i),
                                        old.spec.n_heads)
            new_int = head_interactions(*attention_at_query_granularity(new, j),
                                        new.spec.n_heads)
            sim = head_similarity(old_int, new_int, None if hidden_unchanged else W_h)
            assignments[(i, j)] = match_heads(sim)
        else:
            assignments[(i, j)] = identity_assignment(old.spec.n_heads, new.spec.n_heads)

    config = TransplantConfig(
        rank=adapter.rank if rank is None else rank,
        alpha=adapter.alpha if alpha is None else alpha,
        lft=lft or LftSettings()).validate()
    modules = tuple(m for m in ("q", "k", "v", "o", "up", "down")
                    if any(key[1] == m for key in adapter.entries))
    return MappingPlan(layer_mapping=mapping, head_assignments=assignments,
                       transfer=TransferMatrices(W_h=W_h), config=config,
                       target_modules=modules or ATTN_MODULES)


def transform_head_update(dW_o_head: np.ndarray, W_o_head: np.ndarray,
                          W_h: np.ndarray | None,
                          W_n_head: np.ndarray) -> np.ndarray:
    """One head's update in new coordinates: W_h^T dW W_o^T W_h W_n.

    W_h=None means the hidden basis is unchanged and both factors drop.
    Associated right-to-left so intermediates stay head-width.
    """
    if W_h is None:
        return dW_o_head @ (W_o_head.T @ W_n_head)
    return W_h.T @ (dW_o_head @ (W_o_head.T @ (W_h @ W_n_head)))


def transform_mlp_update(dW: np.ndarray, module: str, W_h: np.ndarray | None,
                         W_i: np.ndarray) -> np.ndarray:
    """MLP update in new coordinates; W_i is the pair's intermediate map."""
    if module == "up":
        return (dW if W_h is None else W_h.T @ dW) @ W_i
    if module == "down":
        out = W_i.T @ dW
        return out if W_h is None else out @ W_h
    raise DataError(f"transform_mlp_update handles up/down, got {module!r}")


def _assemble_attention(module: str, dW: np.ndarray, old: ModelWeights,
                        new: ModelWeights, layer_old: int, layer_new: int,
                        assignment: HeadAssignment,
                        W_h: np.ndarray | None) -> np.ndarray:
    """Per-head transform and placement for one q/k/v/o update."""
    so, sn = old.spec, new.spec
    H_o, H_n = so.n_heads, sn.n_heads
    W_old = old.layers[layer_old][module]
    W_new = new.layers[layer_new][module]
    if module in ("k", "v"):
        dW, _ = replicate_kv_heads(dW, dW, so.n_kv_heads, H_o)
        W_old, _ = replicate_kv_heads(W_old, W_old, so.n_kv_heads, H_o)
        W_new, _ = replicate_kv_heads(W_new, W_new, sn.n_kv_heads, H_n)
    axis = "row" if module == "o" else "column"
    d_blocks = split_heads(dW, H_o, axis)
    old_blocks = split_heads(W_old, H_o, axis)
    new_blocks = split_heads(W_new, H_n, axis)
    out_blocks = [np.zeros_like(b) for b in new_blocks]
    for h_old, h_new in assignment.pairs:
        if h_old >= H_o or h_new >= H_n:
            raise DataError(
                f"head assignment pair ({h_old}, {h_new}) exceeds head counts "
                f"({H_o}, {H_n})")
        if module == "o":
            moved = transform_head_update(d_blocks[h_old].T, old_blocks[h_old].T,
                                          W_h, new_blocks[h_new].T).T
        else:
            moved = transform_head_update(d_blocks[h_old], old_blocks[h_old],
                                          W_h, new_blocks[h_new])
        out_blocks[h_new] = moved
    assembled = np.concatenate(out_blocks, axis=1 if axis == "column" else 0)
    if module in ("k", "v"):
        assembled = group_average_kv(assembled, sn.n_kv_heads, H_n)
    return assembled


def transplant_adapter(old: ModelWeights, new: ModelWeights,
                       adapter: AdapterBundle, plan: MappingPlan) -> AdapterBundle:
    """Rewrite every mapped adapter entry into the new model's spaces.

    Output entries exist only at (new layer, module) positions reached by
    the plan; new layers outside the mapping stay absent. Each assembled
    update is re-factorized at plan.config.rank, which must not exceed
    any transformed module's min dimension.
    """
    old.validate()
    new.validate()
    adapter.validate()
    _check_adapter_fits(adapter, old)
    plan.config.validate()
    rank = plan.config.rank
    W_h = np.asarray(plan.transfer.W_h, dtype=np.float64)
    d_old, d_new = old.spec.hidden_size, new.spec.hidden_size
    if W_h.shape != (d_old, d_new):
        raise DataError(f"plan W_h shape {W_h.shape} does not map {d_old} -> {d_new}")
    hidden_unchanged = d_old == d_new and np.array_equal(W_h, np.eye(d_old))
    W_h_arg = None if hidden_unchanged else W_h

    entries: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = {}
    for i, j in plan.layer_mapping.pairs:
        if i >= old.spec.n_layers or j >= new.spec.n_layers:
            raise DataError(f"layer pair ({i}, {j}) exceeds model depths")
        modules_here = [m for (layer, m) in adapter.entries if layer == i]
        if not modules_here:
            continue
        assignment = None
        if any(m in ATTN_MODULES for m in modules_here):
            if (i, j) not in plan.head_assignments:
                raise DataError(f"plan has no head assignment for mapped pair ({i}, {j})")
            assignment = plan.head_assignments[(i, j)]
        W_i_up = W_i_down = None
        for module in ("q", "k", "v", "o", "up", "down"):
            if module not in modules_here:
                continue
            dW = adapter.delta(i, module)
            if module in ATTN_MODULES:
                assembled = _assemble_attention(module, dW, old, new, i, j,
                                                assignment, W_h_arg)
            elif module == "up":
                if W_i_up is None:
                    W_i_up = intermediate_transform(
                        old.layers[i]["up"], new.layers[j]["up"], W_h)
                assembled = transform_mlp_update(dW, "up", W_h_arg, W_i_up)
            else:
                if W_i_down is None:
                    W_i_down = intermediate_transform(
                        old.layers[i]["down"].T, new.layers[j]["down"].T, W_h)
                assembled = transform_mlp_update(dW, "down", W_h_arg, W_i_down)
            d_in, d_out = new.spec.module_shape(module)
            if assembled.shape != (d_in, d_out):
                raise DataError(
                    f"transformed update for layers.{j}.{module} has shape "
                    f"{assembled.shape}, expected ({d_in}, {d_out})")
            if rank > min(d_in, d_out):
                raise DataError(
                    f"plan rank {rank} exceeds module dims ({d_in}, {d_out}) "
                    f"for layers.{j}.{module}")
            pair = truncated_svd(assembled.T, rank)
            entries[(j, module)] = (pair.A, pair.B)
    if not entries:
        raise DataError("transplant produced no entries: no adapter module sits on a mapped layer")
    return AdapterBundle(rank=rank, alpha=plan.config.alpha, entries=entries).validate()


def emit_lft_config(plan: MappingPlan, path: str | Path) -> dict:
    """Write the fine-tuning recipe consumed by the capture bridge."""
    plan.config.validate()
    lft = plan.config.lft
    doc = {
        "learning_rate": lft.learning_rate,
        "warmup_steps": lft.warmup,
        "epochs": lft.epochs,
        "batch_size": lft.batch_size,
        "scheduler": lft.scheduler,
        "optimizer": "adamw",
        "dropout": 0.0,
        "rank": plan.config.rank,
        "alpha": plan.config.alpha,
        "target_modules": list(plan.target_modules),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc
