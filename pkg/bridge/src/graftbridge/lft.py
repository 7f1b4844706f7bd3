"""Post-transplant fine-tuning: train only the adapter, briefly and gently.

The base model stays frozen; each targeted projection is wrapped so its
output gains (alpha / rank) * B A x with A and B initialized from the
transplanted adapter. Training follows the recipe file verbatim: AdamW at
the given learning rate, a linear-decay schedule with the given warmup,
the given epoch and batch counts.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .formats import AdapterBundle, read_adapter, write_adapter
from .hfmodel import hf_module_path, inspect_checkpoint

log = logging.getLogger("graftbridge")

TRAINER_STATE_OUT = "trainer_state.json"


@dataclass
class LftReport:
    """What the trainer actually did, for auditing against the recipe."""

    learning_rate: float
    warmup_steps: int
    epochs: int
    batch_size: int
    scheduler: str
    optimizer: str
    n_examples: int
    steps: int
    lr_first: float
    lr_last: float
    losses: list[float]
    trained_param_names: list[str]
    out_dir: Path

    def to_json(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "warmup_steps": self.warmup_steps,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "scheduler": self.scheduler,
            "optimizer": self.optimizer,
            "n_examples": self.n_examples,
            "steps": self.steps,
            "lr_first": self.lr_first,
            "lr_last": self.lr_last,
            "losses": self.losses,
            "n_trained_params": len(self.trained_param_names),
        }


def _load_config(path: Path) -> dict:
    if not path.is_file():
        raise DataError(f"fine-tuning config not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"fine-tuning config {path} is not valid JSON: {exc}") from exc
    required = ("learning_rate", "warmup_steps", "epochs", "batch_size",
                "scheduler", "rank", "alpha", "target_modules")
    missing = [k for k in required if k not in doc]
    if missing:
        raise DataError(f"fine-tuning config {path} is missing {missing}")
    if doc["scheduler"] != "linear":
        raise DataError(f"unsupported scheduler {doc['scheduler']!r}, expected 'linear'")
    if doc.get("optimizer", "adamw") != "adamw":
        raise DataError(f"unsupported optimizer {doc['optimizer']!r}, expected 'adamw'")
    if float(doc["learning_rate"]) <= 0:
        raise DataError("learning_rate must be positive")
    if int(doc["epochs"]) < 1 or int(doc["batch_size"]) < 1:
        raise DataError("epochs and batch_size must be >= 1")
    if int(doc["warmup_steps"]) < 0:
        raise DataError("warmup_steps must be >= 0")
    return doc


def _load_examples(path: Path) -> list[str]:
    if not path.is_file():
        raise DataError(f"training data not found: {path}")
    texts: list[str] = []
    if path.suffix == ".jsonl":
        for n, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                texts.append(str(doc["text"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{n}: expected a JSON object with a "
                                f"'text' field: {exc}") from exc
    else:
        texts = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if not texts:
        raise DataError(f"training data {path} holds no examples")
    return texts


def _linear_factor(step: int, warmup: int, total: int) -> float:
    if step < warmup:
        return (step + 1) / max(1, warmup)
    if total <= warmup:
        return 0.0
    return max(0.0, (total - step) / (total - warmup))


def run_lft(adapter_dir: str | Path, config_path: str | Path,
            data_path: str | Path, checkpoint: str | Path,
            out_dir: str | Path, seed: int = 0) -> LftReport:
    """Fine-tune a transplanted adapter on the upgraded checkpoint.

    Only the adapter's A/B factors receive gradients; every base parameter
    is frozen. The adapter's own alpha scales the update at train time and
    is carried into the output bundle unchanged. Writes the tuned bundle
    plus trainer_state.json into out_dir and returns the audit report.
    """
    import torch
    from transformers import AutoModelForCausalLM, AutoTokenizer
    from transformers.utils import logging as hf_logging

    hf_logging.disable_progress_bar()
    adapter_dir, out_dir = Path(adapter_dir), Path(out_dir)
    config = _load_config(Path(config_path))
    bundle = read_adapter(adapter_dir)
    if bundle.rank != int(config["rank"]):
        raise DataError(
            f"adapter rank {bundle.rank} does not match config rank {config['rank']}")
    target_modules = tuple(config["target_modules"])
    info = inspect_checkpoint(Path(checkpoint))

    torch.manual_seed(seed)
    tokenizer = AutoTokenizer.from_pretrained(str(checkpoint))
    model = AutoModelForCausalLM.from_pretrained(
        str(checkpoint), dtype=torch.float32, attn_implementation="eager")
    for p in model.parameters():
        p.requires_grad_(False)

    scale = float(bundle.alpha) / bundle.rank
    dropout = float(config.get("dropout", 0.0))
    LoraLinear = _make_lora_linear()
    wrappers: dict[tuple[int, str], object] = {}
    for (layer, module), (A, B) in sorted(bundle.entries.items()):
        where = f"layers.{layer}.{module}"
        if module not in target_modules:
            raise DataError(f"adapter entry {where}: module not in config "
                            f"target_modules {list(target_modules)}")
        if layer >= info.n_layers:
            raise DataError(f"adapter entry {where}: checkpoint has only "
                            f"{info.n_layers} layers")
        parent, attr = _resolve(model, hf_module_path(layer, module))
        base = getattr(parent, attr)
        if A.shape[1] != base.in_features or B.shape[0] != base.out_features:
            raise DataError(
                f"adapter entry {where}: factors map {A.shape[1]} -> {B.shape[0]}, "
                f"module is {base.in_features} -> {base.out_features}")
        wrapper = LoraLinear(base, A, B, scale, dropout)
        setattr(parent, attr, wrapper)
        wrappers[(layer, module)] = wrapper

    trained = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    if not trained or not all("lora_" in n for n, _ in trained):
        raise DataError("trainable parameters are not exactly the adapter factors")

    texts = _load_examples(Path(data_path))
    lr = float(config["learning_rate"])
    warmup = int(config["warmup_steps"])
    epochs = int(config["epochs"])
    batch_size = int(config["batch_size"])
    batches_per_epoch = math.ceil(len(texts) / batch_size)
    total_steps = batches_per_epoch * epochs

    optimizer = torch.optim.AdamW((p for _, p in trained), lr=lr)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda s: _linear_factor(s, warmup, total_steps))

    rng = np.random.default_rng(seed)
    losses: list[float] = []
    lr_first = lr_last = float(optimizer.param_groups[0]["lr"])
    model.train()
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(texts))
        for b in range(batches_per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            enc = tokenizer([texts[i] for i in idx], return_tensors="pt",
                            padding=True, truncation=True, max_length=128)
            labels = enc["input_ids"].masked_fill(enc["attention_mask"] == 0, -100)
            lr_now = float(optimizer.param_groups[0]["lr"])
            if step == 0:
                lr_first = lr_now
            lr_last = lr_now
            out = model(input_ids=enc["input_ids"],
                        attention_mask=enc["attention_mask"], labels=labels)
            optimizer.zero_grad()
            out.loss.backward()
            optimizer.step()
            scheduler.step()
            losses.append(float(out.loss.detach()))
            step += 1

    entries = {key: (w.lora_A.detach().numpy().astype(np.float64),
                     w.lora_B.detach().numpy().astype(np.float64))
               for key, w in wrappers.items()}
    tuned = AdapterBundle(rank=bundle.rank, alpha=bundle.alpha, entries=entries)
    write_adapter(tuned, out_dir)

    report = LftReport(
        learning_rate=lr, warmup_steps=warmup, epochs=epochs,
        batch_size=batch_size, scheduler=str(config["scheduler"]),
        optimizer=str(config.get("optimizer", "adamw")),
        n_examples=len(texts), steps=step, lr_first=lr_first, lr_last=lr_last,
        losses=losses, trained_param_names=sorted(n for n, _ in trained),
        out_dir=out_dir)
    (out_dir / TRAINER_STATE_OUT).write_text(
        json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    log.info("fine-tuned %d entries for %d steps (lr %g -> %g)",
             len(entries), step, lr_first, lr_last)
    return report


def _resolve(model, dotted: str):
    """Return (parent module, attribute name) for a dotted submodule path."""
    parts = dotted.split(".")
    node = model
    for p in parts[:-1]:
        node = getattr(node, p)
    return node, parts[-1]


def _make_lora_linear():
    import torch

    class LoraLinear(torch.nn.Module):
        """A frozen linear plus a trainable low-rank bypass."""

        def __init__(self, base, A: np.ndarray, B: np.ndarray,
                     scale: float, dropout: float) -> None:
            super().__init__()
            self.base = base
            self.lora_A = torch.nn.Parameter(
                torch.tensor(A, dtype=torch.float32))
            self.lora_B = torch.nn.Parameter(
                torch.tensor(B, dtype=torch.float32))
            self.scale = scale
            self.drop = (torch.nn.Dropout(dropout) if dropout > 0
                         else torch.nn.Identity())

        def forward(self, x):
            bypass = self.drop(x) @ self.lora_A.T @ self.lora_B.T
            return self.base(x) + self.scale * bypass

    return LoraLinear
