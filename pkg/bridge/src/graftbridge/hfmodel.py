"""Checkpoint introspection: family detection, shape plans, tensor loading.

Supported architecture families share one decoder layout (embed_tokens,
per-layer self_attn q/k/v/o projections, mlp gate/up/down projections).
Linear weights are stored out x in; the embedding is stored

    rows = token ids, columns = hidden dims,

which already matches the transplant toolkit's convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

# model_type values whose checkpoints use the layout above. The gate
# projection and norm weights exist in the checkpoint but have no slot in
# the exported format, so they are skipped.
FAMILIES = ("llama", "mistral", "qwen2")

WEIGHTS_FILE = "model.safetensors"

_HF_MODULE_PATHS = {
    "q": "self_attn.q_proj",
    "k": "self_attn.k_proj",
    "v": "self_attn.v_proj",
    "o": "self_attn.o_proj",
    "up": "mlp.up_proj",
    "down": "mlp.down_proj",
}


def hf_weight_name(layer: int, module: str) -> str:
    return f"model.layers.{layer}.{_HF_MODULE_PATHS[module]}.weight"


def hf_module_path(layer: int, module: str) -> str:
    """Dotted path of the submodule inside a loaded causal-LM model."""
    return f"model.layers.{layer}.{_HF_MODULE_PATHS[module]}"


@dataclass(frozen=True)
class CheckpointInfo:
    """Shape facts read from a checkpoint's config.json."""

    path: Path
    name: str
    model_type: str
    vocab_size: int
    hidden_size: int
    intermediate_size: int
    n_layers: int
    n_heads: int
    n_kv_heads: int
    head_dim: int

    def spec_fields(self) -> dict:
        return {
            "name": self.name,
            "vocab_size": self.vocab_size,
            "hidden_size": self.hidden_size,
            "intermediate_size": self.intermediate_size,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "n_kv_heads": self.n_kv_heads,
            "head_dim": self.head_dim,
        }

    def expected_shape(self, module: str) -> tuple[int, int]:
        """Stored (out, in) shape of a projection weight."""
        d, hd = self.hidden_size, self.head_dim
        if module == "q":
            return (self.n_heads * hd, d)
        if module in ("k", "v"):
            return (self.n_kv_heads * hd, d)
        if module == "o":
            return (d, self.n_heads * hd)
        if module == "up":
            return (self.intermediate_size, d)
        if module == "down":
            return (d, self.intermediate_size)
        raise DataError(f"unknown module {module!r}")


def inspect_checkpoint(path: str | Path) -> CheckpointInfo:
    """Read config.json and derive the export geometry."""
    path = Path(path)
    config_path = path / "config.json"
    if not config_path.is_file():
        raise DataError(f"checkpoint has no config.json: {path}")
    try:
        config = json.loads(config_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"config.json in {path} is not valid JSON: {exc}") from exc
    model_type = config.get("model_type", "")
    if model_type not in FAMILIES:
        raise DataError(f"unknown architecture family: {model_type!r}")
    try:
        hidden = int(config["hidden_size"])
        n_heads = int(config["num_attention_heads"])
        info = CheckpointInfo(
            path=path,
            name=str(config.get("name_or_path") or path.name),
            model_type=model_type,
            vocab_size=int(config["vocab_size"]),
            hidden_size=hidden,
            intermediate_size=int(config["intermediate_size"]),
            n_layers=int(config["num_hidden_layers"]),
            n_heads=n_heads,
            n_kv_heads=int(config.get("num_key_value_heads") or n_heads),
            head_dim=int(config.get("head_dim") or hidden // n_heads),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"config.json in {path} is missing or mangles field {exc}") from exc
    if info.n_heads * info.head_dim != info.hidden_size:
        raise DataError(
            f"checkpoint {path}: n_heads*head_dim = {info.n_heads * info.head_dim} "
            f"!= hidden_size {info.hidden_size}")
    if info.n_kv_heads > info.n_heads or info.n_heads % info.n_kv_heads != 0:
        raise DataError(
            f"checkpoint {path}: num_key_value_heads {info.n_kv_heads} must divide "
            f"num_attention_heads {info.n_heads}")
    return info


def load_checkpoint_tensors(info: CheckpointInfo) -> dict[str, np.ndarray]:
    """Load the embedding and projection weights, validated against config.

    Shapes come straight from the file in the stored orientation; any
    tensor missing or disagreeing with config.json fails naming it.
    """
    from safetensors import numpy as st_numpy

    weights_path = info.path / WEIGHTS_FILE
    if not weights_path.is_file():
        raise DataError(f"checkpoint has no {WEIGHTS_FILE}: {info.path}")
    raw = st_numpy.load_file(str(weights_path))

    def take(name: str, want: tuple[int, int]) -> np.ndarray:
        if name not in raw:
            raise DataError(f"checkpoint {info.path}: missing tensor {name!r}")
        arr = np.asarray(raw[name], dtype=np.float64)
        if arr.shape != want:
            raise DataError(
                f"checkpoint {info.path}: tensor {name!r} has shape "
                f"{tuple(arr.shape)}, config expects {want}")
        return arr

    out = {"embedding": take("model.embed_tokens.weight",
                             (info.vocab_size, info.hidden_size))}
    for i in range(info.n_layers):
        for module in _HF_MODULE_PATHS:
            out[f"layers.{i}.{module}"] = take(
                hf_weight_name(i, module), info.expected_shape(module))
    return out


def load_tokenizer_vocab(path: str | Path) -> list[str] | None:
    """Token strings ordered by id, or None when no tokenizer.json exists."""
    tok_path = Path(path) / "tokenizer.json"
    if not tok_path.is_file():
        return None
    try:
        doc = json.loads(tok_path.read_text())
        vocab = doc["model"]["vocab"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"tokenizer.json in {path} is unreadable: {exc}") from exc
    by_id = {int(i): tok for tok, i in vocab.items()}
    added = doc.get("added_tokens") or []
    for entry in added:
        by_id[int(entry["id"])] = str(entry["content"])
    if sorted(by_id) != list(range(len(by_id))):
        raise DataError(f"tokenizer.json in {path} has non-contiguous token ids")
    return [by_id[i] for i in range(len(by_id))]
