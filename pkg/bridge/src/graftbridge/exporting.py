"""Export jobs: checkpoint weights, vocabularies, and calibration activations.

Weights are written exactly as stored (linear projections out x in, the
embedding rows-by-token), with the manifest's orientation flags recording
that convention; the consumer normalizes on load. Activations are the
model's per-layer hidden states (the last layer's carry the final norm,
as that API defines them) mean-pooled over non-pad tokens, k batches of
m rows per hooked layer; the pooling rule and corpus hash go into the
archive metadata, and
the corpus id folds in seed and pooling so two exports only compare equal
when they really came from the same calibration run.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .formats import MODULES, write_activations, write_archive, write_manifest, write_vocab
from .hfmodel import inspect_checkpoint, load_checkpoint_tensors, load_tokenizer_vocab

log = logging.getLogger("graftbridge")

WEIGHTS_OUT = "model.safetensors"
MANIFEST_OUT = "model.manifest.json"
VOCAB_OUT = "vocab.json"
ACTIVATIONS_OUT = "activations.safetensors"

POOLING_RULE = "mean_nonpad"


@dataclass(frozen=True)
class ExportJob:
    """One export run against a single checkpoint.

    layers selects which blocks to capture (None = all); captured layers
    are re-indexed contiguously in the output with the source indices
    recorded in metadata.
    """

    checkpoint: Path
    out_dir: Path
    corpus: Path | None = None
    layers: tuple[int, ...] | None = None
    k: int = 8
    m: int = 16
    seed: int = 0
    max_len: int = 64
    single_threaded: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "checkpoint", Path(self.checkpoint))
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        if self.corpus is not None:
            object.__setattr__(self, "corpus", Path(self.corpus))
        if self.m < 4:
            raise DataError(f"export job needs m >= 4, got m={self.m}")
        if self.k < 1:
            raise DataError(f"export job needs k >= 1, got k={self.k}")
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(int(i) for i in self.layers))


@dataclass
class ExportedModel:
    weights: Path
    manifest: Path
    vocab: Path | None


def export_weights(job: ExportJob) -> ExportedModel:
    """Write the checkpoint's weights, manifest, and vocabulary.

    The archive stores tensors in the source convention; the manifest's
    storage_orientation flags say so (out_in for every projection, in_out
    for the embedding).
    """
    info = inspect_checkpoint(job.checkpoint)
    tensors = load_checkpoint_tensors(info)
    job.out_dir.mkdir(parents=True, exist_ok=True)

    weights_path = job.out_dir / WEIGHTS_OUT
    manifest_path = job.out_dir / MANIFEST_OUT
    write_archive(weights_path, tensors, metadata={"model": info.name})
    write_manifest(info.spec_fields(), manifest_path,
                   orientation={m: "out_in" for m in MODULES})

    vocab_path: Path | None = None
    vocab = load_tokenizer_vocab(job.checkpoint)
    if vocab is not None:
        if len(vocab) > info.vocab_size:
            raise DataError(
                f"checkpoint {job.checkpoint}: tokenizer has {len(vocab)} tokens "
                f"but the embedding has only {info.vocab_size} rows")
        vocab_path = job.out_dir / VOCAB_OUT
        write_vocab(vocab, vocab_path)
    log.info("exported %s: %d layers, vocab %s", info.name, info.n_layers,
             "yes" if vocab_path else "no")
    return ExportedModel(weights=weights_path, manifest=manifest_path, vocab=vocab_path)


def reexport_weights(src_dir: str | Path, dst_dir: str | Path) -> ExportedModel:
    """Re-import an exported model and write it again through the same writers."""
    from .formats import read_archive, read_manifest

    src, dst = Path(src_dir), Path(dst_dir)
    tensors, metadata = read_archive(src / WEIGHTS_OUT)
    manifest = read_manifest(src / MANIFEST_OUT)
    orientation = manifest.pop("storage_orientation", None)
    dst.mkdir(parents=True, exist_ok=True)
    write_archive(dst / WEIGHTS_OUT, tensors, metadata=metadata)
    write_manifest(manifest, dst / MANIFEST_OUT, orientation=orientation)
    vocab_path: Path | None = None
    if (src / VOCAB_OUT).is_file():
        import json

        vocab_path = dst / VOCAB_OUT
        write_vocab(json.loads((src / VOCAB_OUT).read_text()), vocab_path)
    return ExportedModel(weights=dst / WEIGHTS_OUT, manifest=dst / MANIFEST_OUT,
                         vocab=vocab_path)


def _read_corpus(path: Path) -> tuple[list[str], str]:
    if not path.is_file():
        raise DataError(f"corpus file not found: {path}")
    raw = path.read_bytes()
    lines = [ln.strip() for ln in raw.decode("utf-8").splitlines() if ln.strip()]
    return lines, hashlib.sha256(raw).hexdigest()[:16]


def export_activations(job: ExportJob) -> Path:
    """Capture mean-pooled per-layer hidden states into an activation archive.

    Sequences are chosen by a seeded permutation of the corpus, so two
    models exported with the same corpus, seed, and (k, m) carry matching
    metadata and can be compared directly.
    """
    import torch
    from transformers import AutoModelForCausalLM, AutoTokenizer
    from transformers.utils import logging as hf_logging

    hf_logging.disable_progress_bar()
    if job.corpus is None:
        raise DataError("activation export needs a calibration corpus")
    info = inspect_checkpoint(job.checkpoint)
    hooked = job.layers if job.layers is not None else tuple(range(info.n_layers))
    bad = [i for i in hooked if i < 0 or i >= info.n_layers]
    if bad or not hooked:
        raise DataError(
            f"hooked layers {list(hooked)} must be a non-empty subset of "
            f"0..{info.n_layers - 1}")

    lines, corpus_hash = _read_corpus(job.corpus)
    need = job.k * job.m
    if len(lines) < need:
        raise DataError(
            f"corpus has {len(lines)} sequences, need k*m = {need}")
    corpus_id = f"{corpus_hash}:seed={job.seed}:pool={POOLING_RULE}"

    if job.single_threaded:
        torch.set_num_threads(1)
    tokenizer = AutoTokenizer.from_pretrained(str(job.checkpoint))
    model = AutoModelForCausalLM.from_pretrained(
        str(job.checkpoint), dtype=torch.float32, attn_implementation="eager")
    model.eval()

    order = np.random.default_rng(job.seed).permutation(len(lines))[:need]
    chosen = [lines[i] for i in order]

    per_layer: list[list[np.ndarray]] = [[] for _ in hooked]
    with torch.no_grad():
        for b in range(job.k):
            texts = chosen[b * job.m:(b + 1) * job.m]
            enc = tokenizer(texts, return_tensors="pt", padding=True,
                            truncation=True, max_length=job.max_len)
            mask = enc["attention_mask"].to(torch.float32)
            lengths = mask.sum(dim=1)
            if (lengths == 0).any():
                raise DataError("a calibration sequence tokenizes to no tokens")
            out = model(input_ids=enc["input_ids"],
                        attention_mask=enc["attention_mask"],
                        output_hidden_states=True)
            for slot, layer in enumerate(hooked):
                h = out.hidden_states[layer + 1]
                pooled = (h * mask.unsqueeze(-1)).sum(dim=1) / lengths.unsqueeze(-1)
                per_layer[slot].append(pooled.numpy().astype(np.float64))

    job.out_dir.mkdir(parents=True, exist_ok=True)
    out_path = job.out_dir / ACTIVATIONS_OUT
    write_activations(per_layer, out_path, corpus_id, job.k, job.m,
                      extra_metadata={
                          "pooling": POOLING_RULE,
                          "model": info.name,
                          "hooked_layers": ",".join(str(i) for i in hooked),
                          "seed": str(job.seed),
                      })
    log.info("captured %d layers x %d batches x %d rows from %s",
             len(hooked), job.k, job.m, info.name)
    return out_path
