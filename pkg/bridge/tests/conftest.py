"""Shared fixtures: tiny checkpoints, corpora, and exported artifacts.

The old checkpoint is a 2-layer GQA model; the new one is derived from it
by weight surgery (insert a fresh middle layer, replicate each KV group
into per-head keys/values), the same kind of relationship a real upgrade
has. All transplant-toolkit interaction goes through its command line.
"""

from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

N_WORDS = 254
VOCAB_SIZE = N_WORDS + 2
HIDDEN = 32
HEAD_DIM = 8
INTERMEDIATE = 64


def write_tokenizer(path: Path) -> None:
    from tokenizers import Tokenizer
    from tokenizers.models import WordLevel
    from tokenizers.pre_tokenizers import Whitespace
    from transformers import PreTrainedTokenizerFast

    vocab = {"<pad>": 0, "<unk>": 1}
    for i in range(N_WORDS):
        vocab[f"w{i}"] = len(vocab)
    tk = Tokenizer(WordLevel(vocab, unk_token="<unk>"))
    tk.pre_tokenizer = Whitespace()
    tok = PreTrainedTokenizerFast(tokenizer_object=tk, pad_token="<pad>",
                                  unk_token="<unk>")
    tok.save_pretrained(str(path))


def build_old_checkpoint(path: Path, seed: int = 1) -> None:
    import torch
    from transformers import LlamaConfig, LlamaForCausalLM

    cfg = LlamaConfig(vocab_size=VOCAB_SIZE, hidden_size=HIDDEN,
                      intermediate_size=INTERMEDIATE, num_hidden_layers=2,
                      num_attention_heads=4, num_key_value_heads=2,
                      max_position_embeddings=128, tie_word_embeddings=True)
    torch.manual_seed(seed)
    LlamaForCausalLM(cfg).save_pretrained(str(path), safe_serialization=True)
    write_tokenizer(path)


def build_new_checkpoint(old_path: Path, path: Path, seed: int = 77) -> None:
    """Upgrade by surgery: 3 layers (fresh middle), KV groups replicated."""
    import torch
    from transformers import AutoTokenizer, LlamaConfig, LlamaForCausalLM

    old = LlamaForCausalLM.from_pretrained(str(old_path), dtype=torch.float32)
    sd = old.state_dict()
    cfg = LlamaConfig(vocab_size=VOCAB_SIZE, hidden_size=HIDDEN,
                      intermediate_size=INTERMEDIATE, num_hidden_layers=3,
                      num_attention_heads=4, num_key_value_heads=4,
                      max_position_embeddings=128, tie_word_embeddings=True)
    torch.manual_seed(seed)
    new = LlamaForCausalLM(cfg)
    nsd = new.state_dict()

    def rep_kv(w: np.ndarray) -> np.ndarray:
        groups = w.reshape(2, HEAD_DIM, HIDDEN)
        return np.repeat(groups, 2, axis=0).reshape(4 * HEAD_DIM, HIDDEN)

    with torch.no_grad():
        nsd["model.embed_tokens.weight"].copy_(sd["model.embed_tokens.weight"])
        nsd["model.norm.weight"].copy_(sd["model.norm.weight"])
        for i, j in {0: 0, 1: 2}.items():
            for name in ("self_attn.q_proj", "self_attn.o_proj", "mlp.gate_proj",
                         "mlp.up_proj", "mlp.down_proj", "input_layernorm",
                         "post_attention_layernorm"):
                nsd[f"model.layers.{j}.{name}.weight"].copy_(
                    sd[f"model.layers.{i}.{name}.weight"])
            for name in ("self_attn.k_proj", "self_attn.v_proj"):
                w = sd[f"model.layers.{i}.{name}.weight"].numpy()
                nsd[f"model.layers.{j}.{name}.weight"].copy_(
                    torch.tensor(rep_kv(w)))
    new.load_state_dict(nsd)
    new.save_pretrained(str(path), safe_serialization=True)
    AutoTokenizer.from_pretrained(str(old_path)).save_pretrained(str(path))


def loragraft_cli(*args: str) -> subprocess.CompletedProcess:
    """Drive the transplant toolkit through its command line only."""
    return subprocess.run([sys.executable, "-m", "loragraft.cli", *args],
                          capture_output=True, text=True)


@pytest.fixture(scope="session")
def ckpt_old(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("ckpt") / "old"
    build_old_checkpoint(path)
    return path


@pytest.fixture(scope="session")
def ckpt_new(ckpt_old, tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("ckpt") / "new"
    build_new_checkpoint(ckpt_old, path)
    return path


@pytest.fixture(scope="session")
def corpus(tmp_path_factory) -> Path:
    rng = np.random.default_rng(0)
    lines = []
    for _ in range(60):
        words = rng.integers(0, N_WORDS, size=rng.integers(5, 12))
        lines.append(" ".join(f"w{w}" for w in words))
    path = tmp_path_factory.mktemp("data") / "corpus.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="session")
def train_jsonl(tmp_path_factory) -> Path:
    rng = np.random.default_rng(4)
    lines = []
    for _ in range(100):
        words = rng.integers(0, N_WORDS, size=rng.integers(6, 14))
        lines.append(json.dumps({"text": " ".join(f"w{w}" for w in words)}))
    path = tmp_path_factory.mktemp("data") / "train.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def make_adapter_entries(rng: np.random.Generator, layers: int = 2,
                         rank: int = 4) -> dict:
    dims = {"q": (HIDDEN, HIDDEN), "k": (HIDDEN, 2 * HEAD_DIM),
            "v": (HIDDEN, 2 * HEAD_DIM), "o": (HIDDEN, HIDDEN),
            "up": (HIDDEN, INTERMEDIATE), "down": (INTERMEDIATE, HIDDEN)}
    entries = {}
    for layer in range(layers):
        for mod, (d_in, d_out) in dims.items():
            entries[(layer, mod)] = (0.05 * rng.standard_normal((rank, d_in)),
                                     0.05 * rng.standard_normal((d_out, rank)))
    return entries


@pytest.fixture(scope="session")
def adapter_old(tmp_path_factory) -> Path:
    from graftbridge import AdapterBundle, write_adapter

    path = tmp_path_factory.mktemp("adapter") / "old"
    entries = make_adapter_entries(np.random.default_rng(5))
    write_adapter(AdapterBundle(rank=4, alpha=8.0, entries=entries), path)
    return path


@pytest.fixture(scope="session")
def exports(ckpt_old, ckpt_new, corpus, tmp_path_factory) -> dict[str, Path]:
    """Weights + activations for both checkpoints, same corpus and seed."""
    from graftbridge import ExportJob, export_activations, export_weights

    root = tmp_path_factory.mktemp("exports")
    out = {}
    for tag, ckpt in (("old", ckpt_old), ("new", ckpt_new)):
        job = ExportJob(checkpoint=ckpt, out_dir=root / tag, corpus=corpus,
                        k=3, m=8, seed=9, single_threaded=True)
        export_weights(job)
        export_activations(job)
        out[tag] = root / tag
    return out


@pytest.fixture(scope="session")
def transplanted(exports, adapter_old, tmp_path_factory) -> Path:
    """Adapter moved onto the new checkpoint by the toolkit's CLI."""
    out = tmp_path_factory.mktemp("adapter") / "transplanted"
    old, new = exports["old"], exports["new"]
    proc = loragraft_cli(
        "transplant",
        "--old-weights", str(old / "model.safetensors"),
        "--old-manifest", str(old / "model.manifest.json"),
        "--new-weights", str(new / "model.safetensors"),
        "--new-manifest", str(new / "model.manifest.json"),
        "--adapter", str(adapter_old),
        "--activations-old", str(old / "activations.safetensors"),
        "--activations-new", str(new / "activations.safetensors"),
        "--vocab-old", str(old / "vocab.json"),
        "--vocab-new", str(new / "vocab.json"),
        "--delta", "1", "--emit-lft-config", "--no-timestamp",
        "--out", str(out))
    assert proc.returncode == 0, proc.stderr
    return out


@pytest.fixture(scope="session")
def tuned(transplanted, ckpt_new, train_jsonl, tmp_path_factory):
    """One full fine-tuning run, shared by every assertion about it."""
    from graftbridge import run_lft

    out = tmp_path_factory.mktemp("adapter") / "tuned"
    report = run_lft(adapter_dir=transplanted,
                     config_path=transplanted / "lft.json",
                     data_path=train_jsonl, checkpoint=ckpt_new,
                     out_dir=out, seed=3)
    return report, out
