"""Writers and readers for the transplant toolkit's file formats.

The bridge shares no code with the toolkit, only bytes. Archives use the
safetensors layout - an 8-byte little-endian header length, a JSON header
mapping tensor names to {dtype, shape, data_offsets}, then the row-major
payload - and writes are canonical (names sorted, offsets assigned in
sorted order, compact JSON with sorted keys, float32), so re-exporting
unchanged data reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

MODULES = ("q", "k", "v", "o", "up", "down")
TENSOR_FAMILIES = ("embedding",) + MODULES

_DTYPES = {"F32": np.dtype("<f4"), "F64": np.dtype("<f8")}

ADAPTER_WEIGHTS_FILE = "adapter.safetensors"
ADAPTER_CONFIG_FILE = "adapter.json"


def write_archive(path: str | Path, tensors: dict[str, np.ndarray],
                  metadata: dict[str, str] | None = None) -> None:
    """Write a canonical archive: sorted names, float32, compact header."""
    if not tensors:
        raise DataError("refusing to write an archive with no tensors")
    header: dict[str, object] = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    blobs: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        if not name or name == "__metadata__":
            raise DataError(f"invalid tensor name {name!r}")
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        if not np.isfinite(arr).all():
            raise DataError(f"tensor {name!r} contains non-finite values")
        raw = arr.tobytes()
        header[name] = {
            "dtype": "F32",
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def read_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read an archive; returns (name -> float64 array, metadata)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"archive not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise DataError(f"archive too short for a header: {path}")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if 8 + hlen > len(raw):
        raise DataError(f"header length {hlen} overruns file: {path}")
    try:
        header = json.loads(raw[8:8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"bad archive header in {path}: {exc}") from exc
    payload = raw[8 + hlen:]
    metadata = {str(k): str(v) for k, v in header.pop("__metadata__", {}).items()}
    tensors: dict[str, np.ndarray] = {}
    for name, info in header.items():
        try:
            dtype = _DTYPES[info["dtype"]]
            shape = tuple(int(s) for s in info["shape"])
            begin, end = info["data_offsets"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad entry for tensor {name!r} in {path}: {exc}") from exc
        count = int(np.prod(shape)) if shape else 1
        if end - begin != count * dtype.itemsize or begin < 0 or end > len(payload):
            raise DataError(f"offsets for tensor {name!r} do not match its shape in {path}")
        arr = np.frombuffer(payload[begin:end], dtype=dtype).reshape(shape)
        arr = arr.astype(np.float64)
        if not np.isfinite(arr).all():
            raise DataError(f"tensor {name!r} in {path} contains non-finite values")
        tensors[name] = arr
    return tensors, metadata


# ---------------------------------------------------------------------------
# manifests and vocabularies


def write_manifest(fields: dict, path: str | Path,
                   orientation: dict[str, str] | None = None) -> None:
    """Write a model manifest; orientation overrides default in_out flags."""
    doc = dict(fields)
    doc["storage_orientation"] = {f: "in_out" for f in TENSOR_FAMILIES}
    if orientation:
        for fam, o in orientation.items():
            if fam not in TENSOR_FAMILIES:
                raise DataError(f"unknown tensor family {fam!r}")
            if o not in ("in_out", "out_in"):
                raise DataError(f"orientation for {fam!r} must be in_out or out_in")
            doc["storage_orientation"][fam] = o
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc


def write_vocab(tokens: list[str], path: str | Path) -> None:
    """A vocabulary is a JSON array of strings; index = embedding row."""
    Path(path).write_text(json.dumps(list(tokens), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# activation archives


def write_activations(layers: list[list[np.ndarray]], path: str | Path,
                      corpus_id: str, k: int, m: int,
                      extra_metadata: dict[str, str] | None = None) -> None:
    """Write per-layer batch rows under layer.<i>.batch.<b> keys.

    Layer keys are contiguous 0..L-1 regardless of which source layers
    were hooked; the hooked indices go into the metadata instead.
    """
    tensors = {}
    for i, batches in enumerate(layers):
        if len(batches) != k:
            raise DataError(f"layer {i} has {len(batches)} batches, expected k={k}")
        for b, arr in enumerate(batches):
            if arr.ndim != 2 or arr.shape[0] != m:
                raise DataError(
                    f"layer {i} batch {b} has shape {arr.shape}, expected ({m}, width)")
            tensors[f"layer.{i}.batch.{b}"] = arr
    metadata = {"corpus": corpus_id, "k": str(k), "m": str(m)}
    if extra_metadata:
        metadata.update(extra_metadata)
    write_archive(path, tensors, metadata=metadata)


# ---------------------------------------------------------------------------
# adapter bundles


@dataclass
class AdapterBundle:
    """A LoRA adapter: (layer, module) -> (A, B) with shared rank and alpha.

    A is r x d_in and B is d_out x r; the additive update applied at
    runtime is (alpha / rank) * B @ A in out x in orientation.
    """

    rank: int
    alpha: float
    entries: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]]

    def validate(self) -> "AdapterBundle":
        if self.rank < 1:
            raise DataError(f"adapter rank must be >= 1, got {self.rank}")
        if not self.entries:
            raise DataError("adapter bundle holds no entries")
        for (layer, module), (A, B) in self.entries.items():
            where = f"layers.{layer}.{module}"
            if module not in MODULES:
                raise DataError(f"adapter entry {where}: unknown module {module!r}")
            if A.ndim != 2 or B.ndim != 2:
                raise DataError(f"adapter entry {where}: A and B must be matrices")
            if A.shape[0] != self.rank or B.shape[1] != self.rank:
                raise DataError(
                    f"adapter entry {where}: rank dims {A.shape[0]}/{B.shape[1]} "
                    f"disagree with bundle rank {self.rank}")
        return self


def write_adapter(bundle: AdapterBundle, path: str | Path) -> None:
    """Write a bundle as a directory: adapter.safetensors + adapter.json."""
    bundle.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, np.ndarray] = {}
    for (layer, module), (A, B) in bundle.entries.items():
        tensors[f"layers.{layer}.{module}.lora_A"] = A
        tensors[f"layers.{layer}.{module}.lora_B"] = B
    write_archive(path / ADAPTER_WEIGHTS_FILE, tensors)
    sidecar = {"rank": bundle.rank, "alpha": bundle.alpha}
    (path / ADAPTER_CONFIG_FILE).write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def read_adapter(path: str | Path) -> AdapterBundle:
    path = Path(path)
    config_path = path / ADAPTER_CONFIG_FILE
    if not config_path.is_file():
        raise DataError(f"adapter sidecar not found: {config_path}")
    try:
        sidecar = json.loads(config_path.read_text())
        rank = int(sidecar["rank"])
        alpha = float(sidecar["alpha"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad adapter sidecar {config_path}: {exc}") from exc
    tensors, _ = read_archive(path / ADAPTER_WEIGHTS_FILE)
    halves: dict[tuple[int, str], dict[str, np.ndarray]] = {}
    for name, arr in tensors.items():
        parts = name.split(".")
        if len(parts) != 4 or parts[0] != "layers" or parts[3] not in ("lora_A", "lora_B"):
            raise DataError(f"adapter tensor {name!r}: expected layers.<i>.<module>.lora_A|lora_B")
        try:
            layer = int(parts[1])
        except ValueError as exc:
            raise DataError(f"adapter tensor {name!r}: bad layer index") from exc
        halves.setdefault((layer, parts[2]), {})[parts[3]] = arr
    entries = {}
    for key, pair in sorted(halves.items()):
        if set(pair) != {"lora_A", "lora_B"}:
            missing = ({"lora_A", "lora_B"} - set(pair)).pop()
            raise DataError(f"adapter entry layers.{key[0]}.{key[1]} is missing {missing}")
        entries[key] = (pair["lora_A"], pair["lora_B"])
    return AdapterBundle(rank=rank, alpha=alpha, entries=entries).validate()
