"""Command-line driver for the transplant pipeline.

Subcommands: plan-layers, plan-heads, transplant, gen-toy,
export-similarity, inspect. Outputs are JSON to stdout, or to --out when
given. Results are deterministic for identical inputs up to the
generated_at field, which --no-timestamp removes.

A JSON config file (--config) may supply any long option, key names with
underscores; explicit flags win over the file. Exit codes: 0 success,
2 usage error, 3 bad input data, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .cka import layer_similarity_matrix, read_similarity_csv, write_similarity_csv
from .errors import DataError, NumericError
from .headmap import head_interactions, head_similarity, identity_assignment, match_heads
from .layermap import orient_and_map
from .tensorio import (ADAPTER_WEIGHTS_FILE, load_activations, load_adapter,
                       load_model, load_vocab, read_archive, save_activations,
                       save_adapter, save_model, save_vocab)
from .toyforge import SCENARIO_KINDS, capture_pair, gen_scenario, scenario_to_json
from .transplant import (build_plan, emit_lft_config, transplant_adapter,
                         attention_at_query_granularity, hidden_map)

log = logging.getLogger("loragraft")


class _UsageError(Exception):
    """Missing or inconsistent options; reported with usage text, exit 2."""


@dataclass
class RunConfig:
    """Resolved options for one subcommand invocation."""

    args: argparse.Namespace
    overrides: dict

    def get(self, key: str, default=None):
        value = getattr(self.args, key, None)
        if value is not None:
            return value
        if key in self.overrides:
            return self.overrides[key]
        return default

    def require(self, key: str, flag: str):
        value = self.get(key)
        if value is None:
            raise _UsageError(f"missing required option {flag} (flag or config file)")
        return value


def _load_config_file(path: str | None, parser_dests: set[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataError(f"config file {p} must hold a JSON object")
    unknown = sorted(set(doc) - parser_dests)
    if unknown:
        raise DataError(f"config file {p}: unknown keys {unknown}")
    return doc


def _timestamped(doc: dict, cfg: RunConfig) -> dict:
    if not cfg.get("no_timestamp", False):
        doc["generated_at"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return doc


def _emit(doc: dict, cfg: RunConfig) -> None:
    text = json.dumps(_timestamped(doc, cfg), indent=2, sort_keys=True) + "\n"
    out = cfg.get("out")
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _similarity_for(cfg: RunConfig):
    """Similarity matrix from --similarity CSV or the two activation files."""
    csv = cfg.get("similarity")
    if csv is not None:
        return read_similarity_csv(csv)
    acts_old = load_activations(cfg.require("activations_old", "--activations-old"))
    acts_new = load_activations(cfg.require("activations_new", "--activations-new"))
    return layer_similarity_matrix(acts_old, acts_new)


def _load_model_pair(cfg: RunConfig):
    old = load_model(cfg.require("old_weights", "--old-weights"),
                     cfg.require("old_manifest", "--old-manifest"))
    new = load_model(cfg.require("new_weights", "--new-weights"),
                     cfg.require("new_manifest", "--new-manifest"))
    return old, new


def _load_vocabs(cfg: RunConfig):
    vo, vn = cfg.get("vocab_old"), cfg.get("vocab_new")
    return (load_vocab(vo) if vo else None, load_vocab(vn) if vn else None)


# ---------------------------------------------------------------------------
# subcommands


def cmd_plan_layers(cfg: RunConfig) -> int:
    sim = _similarity_for(cfg)
    mapping = orient_and_map(sim, cfg.get("delta"))
    doc = {
        "mapping": [{"old": i, "new": j, "cka": float(sim.S[i, j])}
                    for i, j in mapping.pairs],
        "total": mapping.total_score,
        "delta": mapping.delta,
        "ops": mapping.ops,
    }
    _emit(doc, cfg)
    return 0


def _pairs_from_mapping_file(path: str) -> list[tuple[int, int]]:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"mapping file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"mapping file {p} is not valid JSON: {exc}") from exc
    rows = doc.get("mapping") if isinstance(doc, dict) else doc
    if not isinstance(rows, list) or not rows:
        raise DataError(f"mapping file {p} holds no layer pairs")
    try:
        return [(int(r["old"]), int(r["new"])) for r in rows]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"mapping file {p}: rows need integer old/new fields") from exc


def cmd_plan_heads(cfg: RunConfig) -> int:
    old, new = _load_model_pair(cfg)
    pairs = _pairs_from_mapping_file(cfg.require("mapping", "--mapping"))
    vocab_old, vocab_new = _load_vocabs(cfg)
    W_h = hidden_map(old, new, vocab_old, vocab_new)
    hidden_unchanged = (W_h.shape[0] == W_h.shape[1]
                        and np.array_equal(W_h, np.eye(W_h.shape[0])))
    no_heads = cfg.get("no_head_mapping", False)
    out_rows = []
    for i, j in pairs:
        if i >= old.spec.n_layers or j >= new.spec.n_layers:
            raise DataError(f"mapped pair ({i}, {j}) is out of range for the models")
        if no_heads:
            assignment = identity_assignment(old.spec.n_heads, new.spec.n_heads)
        else:
            old_int = head_interactions(*attention_at_query_granularity(old, i),
                                        old.spec.n_heads)
            new_int = head_interactions(*attention_at_query_granularity(new, j),
                                        new.spec.n_heads)
            sim = head_similarity(old_int, new_int,
                                  None if hidden_unchanged else W_h)
            assignment = match_heads(sim)
        out_rows.append({
            "layer_old": i,
            "layer_new": j,
            "assignment": [[a, b] for a, b in assignment.pairs],
            "sim_total": assignment.sim_total,
        })
    _emit({"head_assignments": out_rows}, cfg)
    return 0


def cmd_transplant(cfg: RunConfig) -> int:
    old, new = _load_model_pair(cfg)
    adapter = load_adapter(cfg.require("adapter", "--adapter"))
    vocab_old, vocab_new = _load_vocabs(cfg)
    similarity = None
    acts_old = acts_new = None
    if cfg.get("similarity") is not None:
        similarity = read_similarity_csv(cfg.get("similarity"))
    else:
        acts_old = load_activations(cfg.require("activations_old", "--activations-old"))
        acts_new = load_activations(cfg.require("activations_new", "--activations-new"))
    plan = build_plan(old, new, adapter, acts_old, acts_new,
                      similarity=similarity,
                      vocab_old=vocab_old, vocab_new=vocab_new,
                      delta=cfg.get("delta"), rank=cfg.get("rank"),
                      head_mapping=not cfg.get("no_head_mapping", False))
    result = transplant_adapter(old, new, adapter, plan)

    out_dir = Path(cfg.require("out", "--out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    save_adapter(result, out_dir)
    doc = {
        "adapter_dir": str(out_dir),
        "rank": result.rank,
        "alpha": result.alpha,
        "layer_mapping": [list(p) for p in plan.layer_mapping.pairs],
        "head_assignments": [
            {"layer_old": i, "layer_new": j,
             "assignment": [list(p) for p in a.pairs]}
            for (i, j), a in sorted(plan.head_assignments.items())
        ],
        "entries": sorted(f"layers.{l}.{m}" for l, m in result.entries),
    }
    if cfg.get("emit_lft_config", False):
        lft_path = out_dir / "lft.json"
        emit_lft_config(plan, lft_path)
        doc["lft_config"] = str(lft_path)
    text = json.dumps(_timestamped(doc, cfg), indent=2, sort_keys=True) + "\n"
    (out_dir / "plan.json").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_gen_toy(cfg: RunConfig) -> int:
    kind = cfg.require("kind", "--kind")
    seed = int(cfg.get("seed", 0))
    out_dir = Path(cfg.require("out_dir", "--out-dir"))
    k = int(cfg.get("k", 8))
    m = int(cfg.get("m", 16))
    seq_len = int(cfg.get("seq_len", 12))

    old, new, adapter, scenario = gen_scenario(kind, seed)
    acts_old, acts_new = capture_pair(old, new, scenario, k=k, m=m, seq_len=seq_len)

    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(old, out_dir / "old.safetensors", out_dir / "old.manifest.json")
    save_model(new, out_dir / "new.safetensors", out_dir / "new.manifest.json")
    save_adapter(adapter, out_dir / "adapter")
    save_activations(acts_old, out_dir / "activations-old.safetensors")
    save_activations(acts_new, out_dir / "activations-new.safetensors")
    save_vocab(list(scenario.vocab_old), out_dir / "vocab-old.json")
    save_vocab(list(scenario.vocab_new), out_dir / "vocab-new.json")
    scenario_doc = scenario_to_json(scenario)
    (out_dir / "scenario.json").write_text(
        json.dumps(scenario_doc, indent=2, sort_keys=True) + "\n")

    _emit({"out_dir": str(out_dir), "kind": kind, "seed": seed,
           "files": sorted(p.name for p in out_dir.iterdir())}, cfg)
    return 0


def cmd_export_similarity(cfg: RunConfig) -> int:
    sim = _similarity_for(cfg)
    out = cfg.require("out", "--out")
    write_similarity_csv(sim, out)
    rows, cols = sim.S.shape
    sys.stdout.write(json.dumps(
        _timestamped({"out": str(out), "rows": rows, "cols": cols}, cfg),
        indent=2, sort_keys=True) + "\n")
    return 0


def _inspect_path(path: Path) -> dict:
    if path.is_dir():
        if (path / ADAPTER_WEIGHTS_FILE).is_file():
            bundle = load_adapter(path)
            return {
                "kind": "adapter",
                "rank": bundle.rank,
                "alpha": bundle.alpha,
                "n_entries": len(bundle.entries),
                "layers": bundle.layers_present(),
                "modules": sorted({m for _, m in bundle.entries}),
            }
        raise DataError(f"directory {path} does not look like an adapter bundle")
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    if path.suffix == ".json":
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path} is not valid JSON: {exc}") from exc
        if isinstance(doc, list):
            return {"kind": "vocab", "n_tokens": len(doc)}
        return {"kind": "json", "keys": sorted(doc)}
    tensors, metadata = read_archive(path)
    names = sorted(tensors)
    summary = {
        "kind": "tensor-archive",
        "n_tensors": len(names),
        "total_values": int(sum(t.size for t in tensors.values())),
        "metadata": metadata,
    }
    if all(n.startswith("layer.") for n in names):
        summary["kind"] = "activations"
    elif "embedding" in names:
        summary["kind"] = "model-weights"
    summary["first_tensors"] = {n: list(tensors[n].shape) for n in names[:4]}
    return summary


def cmd_inspect(cfg: RunConfig) -> int:
    doc = _inspect_path(Path(cfg.require("path", "--path")))
    _emit(doc, cfg)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="JSON file supplying any of this subcommand's options")
    sp.add_argument("--no-timestamp", action="store_const", const=True, default=None,
                    help="omit the generated_at field from JSON outputs")
    sp.add_argument("-v", "--verbose", action="count", default=0,
                    help="increase log verbosity (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loragraft",
        description="Transplant a LoRA adapter from an old model onto an "
                    "upgraded one via layer, head, and dimension alignment.")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("plan-layers", help="align layers by activation similarity")
    sp.add_argument("--activations-old")
    sp.add_argument("--activations-new")
    sp.add_argument("--similarity", help="read a precomputed similarity CSV instead")
    sp.add_argument("--delta", type=int)
    sp.add_argument("--out")
    _add_common(sp)
    sp.set_defaults(func=cmd_plan_layers)

    sp = sub.add_parser("plan-heads", help="align attention heads per mapped layer pair")
    sp.add_argument("--old-weights")
    sp.add_argument("--old-manifest")
    sp.add_argument("--new-weights")
    sp.add_argument("--new-manifest")
    sp.add_argument("--mapping", help="layer mapping JSON from plan-layers")
    sp.add_argument("--vocab-old")
    sp.add_argument("--vocab-new")
    sp.add_argument("--no-head-mapping", action="store_const", const=True, default=None)
    sp.add_argument("--out")
    _add_common(sp)
    sp.set_defaults(func=cmd_plan_heads)

    sp = sub.add_parser("transplant", help="run the full pipeline and write the new adapter")
    sp.add_argument("--old-weights")
    sp.add_argument("--old-manifest")
    sp.add_argument("--new-weights")
    sp.add_argument("--new-manifest")
    sp.add_argument("--adapter")
    sp.add_argument("--activations-old")
    sp.add_argument("--activations-new")
    sp.add_argument("--similarity", help="read a precomputed similarity CSV instead")
    sp.add_argument("--vocab-old")
    sp.add_argument("--vocab-new")
    sp.add_argument("--out", help="output adapter directory")
    sp.add_argument("--rank", type=int)
    sp.add_argument("--delta", type=int)
    sp.add_argument("--no-head-mapping", action="store_const", const=True, default=None)
    sp.add_argument("--emit-lft-config", action="store_const", const=True, default=None,
                    help="also write lft.json with the fine-tuning recipe")
    _add_common(sp)
    sp.set_defaults(func=cmd_transplant)

    sp = sub.add_parser("gen-toy", help="generate a toy scenario with planted ground truth")
    sp.add_argument("--kind", choices=SCENARIO_KINDS)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out-dir")
    sp.add_argument("--k", type=int, help="calibration batches (default 8)")
    sp.add_argument("--m", type=int, help="examples per batch (default 16)")
    sp.add_argument("--seq-len", type=int, help="tokens per example (default 12)")
    _add_common(sp)
    sp.set_defaults(func=cmd_gen_toy)

    sp = sub.add_parser("export-similarity", help="write the layer-similarity matrix as CSV")
    sp.add_argument("--activations-old")
    sp.add_argument("--activations-new")
    sp.add_argument("--similarity", help="re-export an existing CSV (validates it)")
    sp.add_argument("--out")
    _add_common(sp)
    sp.set_defaults(func=cmd_export_similarity)

    sp = sub.add_parser("inspect", help="summarize an artifact (model, adapter, activations)")
    sp.add_argument("--path")
    sp.add_argument("--out")
    _add_common(sp)
    sp.set_defaults(func=cmd_inspect)

    for action in sub.choices.values():
        action.set_defaults(parser=action)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose or 0, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    dests = {a for a in vars(args) if a not in ("func", "command", "config")}
    try:
        overrides = _load_config_file(args.config, dests)
        cfg = RunConfig(args=args, overrides=overrides)
        return args.func(cfg)
    except _UsageError as exc:
        args.parser.print_usage(sys.stderr)
        sys.stderr.write(f"{args.parser.prog}: error: {exc}\n")
        return 2
    except DataError as exc:
        log.error("%s", exc)
        return 3
    except NumericError as exc:
        log.error("%s", exc)
        return 4


if __name__ == "__main__":
    sys.exit(main())
