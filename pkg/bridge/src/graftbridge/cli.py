"""Command-line entry points: export-weights, export-activations, run-lft.

Exit codes: 0 success, 2 usage, 3 malformed or inconsistent input data.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import BridgeError

log = logging.getLogger("graftbridge")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graftbridge",
        description="Export checkpoint weights and calibration activations "
                    "into adapter-transplant formats; run the post-transplant "
                    "fine-tuning step.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("-v", "--verbose", action="count", default=0,
                       help="increase log verbosity (repeatable)")

    p = sub.add_parser("export-weights",
                       help="write a checkpoint's weights, manifest, and vocabulary")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--out-dir", required=True)
    common(p)

    p = sub.add_parser("export-activations",
                       help="capture mean-pooled hidden states on a calibration corpus")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--corpus", required=True, help="text file, one sequence per line")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--k", type=int, default=8, help="number of batches")
    p.add_argument("--m", type=int, default=16, help="rows per batch")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--layers", default=None,
                   help="comma-separated layer indices to capture (default all)")
    p.add_argument("--single-threaded", action="store_true",
                   help="pin the forward passes to one thread")
    common(p)

    p = sub.add_parser("run-lft",
                       help="fine-tune a transplanted adapter per its recipe file")
    p.add_argument("--checkpoint", required=True, help="upgraded checkpoint directory")
    p.add_argument("--adapter", required=True, help="transplanted adapter directory")
    p.add_argument("--lft-config", required=True, help="recipe JSON from the transplant")
    p.add_argument("--data", required=True, help="training examples (.jsonl or text lines)")
    p.add_argument("--out", required=True, help="output adapter directory")
    p.add_argument("--seed", type=int, default=0)
    common(p)

    return parser


def _emit(doc: dict) -> None:
    json.dump(doc, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _cmd_export_weights(args: argparse.Namespace) -> dict:
    from .exporting import ExportJob, export_weights

    job = ExportJob(checkpoint=args.checkpoint, out_dir=args.out_dir)
    exported = export_weights(job)
    return {
        "weights": str(exported.weights),
        "manifest": str(exported.manifest),
        "vocab": None if exported.vocab is None else str(exported.vocab),
    }


def _cmd_export_activations(args: argparse.Namespace) -> dict:
    from .exporting import ExportJob, export_activations

    layers = None
    if args.layers is not None:
        try:
            layers = tuple(int(s) for s in args.layers.split(",") if s.strip())
        except ValueError as exc:
            raise BridgeError(f"bad --layers value {args.layers!r}: {exc}") from exc
    job = ExportJob(checkpoint=args.checkpoint, out_dir=args.out_dir,
                    corpus=args.corpus, layers=layers, k=args.k, m=args.m,
                    seed=args.seed, max_len=args.max_len,
                    single_threaded=args.single_threaded)
    out = export_activations(job)
    return {"activations": str(out), "k": args.k, "m": args.m}


def _cmd_run_lft(args: argparse.Namespace) -> dict:
    from .lft import run_lft

    report = run_lft(adapter_dir=args.adapter, config_path=args.lft_config,
                     data_path=args.data, checkpoint=args.checkpoint,
                     out_dir=args.out, seed=args.seed)
    doc = report.to_json()
    doc["adapter"] = str(report.out_dir)
    return doc


_COMMANDS = {
    "export-weights": _cmd_export_weights,
    "export-activations": _cmd_export_activations,
    "run-lft": _cmd_run_lft,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        _emit(_COMMANDS[args.command](args))
    except BridgeError as exc:
        log.error("%s", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
