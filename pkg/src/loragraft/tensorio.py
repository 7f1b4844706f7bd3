"""Tensor archives, manifests, and the domain types built from them.

Archive layout (safetensors-compatible):

    [8 bytes]  little-endian uint64, byte length N of the JSON header
    [N bytes]  UTF-8 JSON: {tensor_name: {"dtype": "F32"|"F64",
               "shape": [...], "data_offsets": [begin, end]},
               "__metadata__": {str: str}, ...}
    [payload]  raw little-endian tensor data, row-major, offsets relative
               to the end of the header

Writes are canonical: names sorted, offsets assigned in sorted order,
compact JSON with sorted keys, float32 payloads. Readers accept any
valid offset arrangement and upcast to float64; all in-memory math is
float64 and values are rounded back to float32 only on save.

Weight matrices follow one orientation everywhere: input-dim x output-dim,
i.e. a forward pass is y = x @ W. Manifests carry a `storage_orientation`
flag per tensor family so exports that store the transposed (out x in)
convention load correctly; the loader normalizes with a single transpose.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

# Module families, in canonical order. q/k/v/o are the attention
# projections, up/down the MLP pair.
ATTN_MODULES = ("q", "k", "v", "o")
MLP_MODULES = ("up", "down")
MODULES = ATTN_MODULES + MLP_MODULES

TENSOR_FAMILIES = ("embedding",) + MODULES

_DTYPES = {"F32": np.dtype("<f4"), "F64": np.dtype("<f8")}

ADAPTER_WEIGHTS_FILE = "adapter.safetensors"
ADAPTER_CONFIG_FILE = "adapter.json"


# ---------------------------------------------------------------------------
# raw archive read/write


def write_archive(path: str | Path, tensors: dict[str, np.ndarray],
                  metadata: dict[str, str] | None = None) -> None:
    """Write a canonical archive: sorted names, float32, compact header.

    Args:
        path: destination file.
        tensors: name -> array. Values are converted to little-endian
            float32; names must be non-empty and unique (dict enforces).
        metadata: optional string-to-string map stored under __metadata__.
    """
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
# model spec / manifest


@dataclass(frozen=True)
class ModelSpec:
    """Static shape description of one model, as stored in its manifest."""

    name: str
    vocab_size: int
    hidden_size: int
    intermediate_size: int
    n_layers: int
    n_heads: int
    n_kv_heads: int
    head_dim: int

    def __post_init__(self) -> None:
        for fname in ("vocab_size", "hidden_size", "intermediate_size",
                      "n_layers", "n_heads", "n_kv_heads", "head_dim"):
            v = getattr(self, fname)
            if not isinstance(v, int) or v < 1:
                raise DataError(f"model {self.name!r}: {fname} must be a positive int, got {v!r}")
        if self.hidden_size != self.n_heads * self.head_dim:
            raise DataError(
                f"model {self.name!r}: hidden_size {self.hidden_size} != "
                f"n_heads*head_dim {self.n_heads * self.head_dim}")
        if self.n_kv_heads > self.n_heads or self.n_heads % self.n_kv_heads != 0:
            raise DataError(
                f"model {self.name!r}: n_kv_heads {self.n_kv_heads} must divide "
                f"n_heads {self.n_heads}")

    def module_shape(self, module: str) -> tuple[int, int]:
        """Expected (input-dim, output-dim) of a module's weight."""
        d = self.hidden_size
        if module in ("q", "o"):
            return (d, d)
        if module in ("k", "v"):
            return (d, self.n_kv_heads * self.head_dim)
        if module == "up":
            return (d, self.intermediate_size)
        if module == "down":
            return (self.intermediate_size, d)
        raise DataError(f"unknown module {module!r}")


def save_manifest(spec: ModelSpec, path: str | Path,
                  orientation: dict[str, str] | None = None) -> None:
    doc = {
        "name": spec.name,
        "vocab_size": spec.vocab_size,
        "hidden_size": spec.hidden_size,
        "intermediate_size": spec.intermediate_size,
        "n_layers": spec.n_layers,
        "n_heads": spec.n_heads,
        "n_kv_heads": spec.n_kv_heads,
        "head_dim": spec.head_dim,
        "storage_orientation": {f: "in_out" for f in TENSOR_FAMILIES},
    }
    if orientation:
        doc["storage_orientation"].update(orientation)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> tuple[ModelSpec, dict[str, str]]:
    """Returns (spec, per-family storage orientation)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
    try:
        spec = ModelSpec(
            name=str(doc["name"]),
            vocab_size=int(doc["vocab_size"]),
            hidden_size=int(doc["hidden_size"]),
            intermediate_size=int(doc["intermediate_size"]),
            n_layers=int(doc["n_layers"]),
            n_heads=int(doc["n_heads"]),
            n_kv_heads=int(doc["n_kv_heads"]),
            head_dim=int(doc["head_dim"]),
        )
    except KeyError as exc:
        raise DataError(f"manifest {path} is missing field {exc}") from exc
    orientation = {f: "in_out" for f in TENSOR_FAMILIES}
    for fam, o in doc.get("storage_orientation", {}).items():
        if fam not in TENSOR_FAMILIES:
            raise DataError(f"manifest {path}: unknown tensor family {fam!r}")
        if o not in ("in_out", "out_in"):
            raise DataError(f"manifest {path}: orientation for {fam!r} must be in_out or out_in")
        orientation[fam] = o
    return spec, orientation


# ---------------------------------------------------------------------------
# model weights


@dataclass
class ModelWeights:
    """Embedding plus per-layer module weights, in_out orientation, float64."""

    spec: ModelSpec
    embedding: np.ndarray
    layers: list[dict[str, np.ndarray]]

    def validate(self) -> "ModelWeights":
        s = self.spec
        if self.embedding.shape != (s.vocab_size, s.hidden_size):
            raise DataError(
                f"model {s.name!r}: embedding shape {self.embedding.shape} != "
                f"({s.vocab_size}, {s.hidden_size})")
        if len(self.layers) != s.n_layers:
            raise DataError(
                f"model {s.name!r}: {len(self.layers)} layers present, manifest says {s.n_layers}")
        for i, layer in enumerate(self.layers):
            for module in MODULES:
                if module not in layer:
                    raise DataError(f"model {s.name!r}: layer {i} is missing module {module!r}")
                want = s.module_shape(module)
                got = layer[module].shape
                if got != want:
                    raise DataError(
                        f"model {s.name!r}: layers.{i}.{module} has shape {got}, expected {want}")
        return self


def _weight_key(layer: int, module: str) -> str:
    return f"layers.{layer}.{module}"


def save_model(weights: ModelWeights, weights_path: str | Path,
               manifest_path: str | Path) -> None:
    weights.validate()
    tensors: dict[str, np.ndarray] = {"embedding": weights.embedding}
    for i, layer in enumerate(weights.layers):
        for module in MODULES:
            tensors[_weight_key(i, module)] = layer[module]
    write_archive(weights_path, tensors, metadata={"model": weights.spec.name})
    save_manifest(weights.spec, manifest_path)


def load_model(weights_path: str | Path, manifest_path: str | Path) -> ModelWeights:
    """Load weights + manifest, normalizing storage orientation to in x out."""
    spec, orientation = load_manifest(manifest_path)
    tensors, _ = read_archive(weights_path)

    def take(name: str, family: str) -> np.ndarray:
        if name not in tensors:
            raise DataError(f"weights {weights_path}: missing tensor {name!r}")
        arr = tensors.pop(name)
        if orientation[family] == "out_in":
            arr = arr.T
        return np.ascontiguousarray(arr)

    embedding = take("embedding", "embedding")
    layers = []
    for i in range(spec.n_layers):
        layers.append({m: take(_weight_key(i, m), m) for m in MODULES})
    if tensors:
        stray = sorted(tensors)[0]
        raise DataError(f"weights {weights_path}: unexpected tensor {stray!r}")
    return ModelWeights(spec=spec, embedding=embedding, layers=layers).validate()


# ---------------------------------------------------------------------------
# adapters


@dataclass
class AdapterBundle:
    """A LoRA adapter: (layer, module) -> (A, B) with shared rank and alpha.

    A is r x d_in and B is d_out x r for the module's in_out dims; the
    additive update in in_out orientation is (B @ A).T.
    """

    rank: int
    alpha: float
    entries: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def validate(self) -> "AdapterBundle":
        if self.rank < 1:
            raise DataError(f"adapter rank must be >= 1, got {self.rank}")
        if not np.isfinite(self.alpha):
            raise DataError("adapter alpha must be finite")
        if not self.entries:
            raise DataError("adapter bundle holds no entries")
        for (layer, module), (A, B) in self.entries.items():
            where = f"layers.{layer}.{module}"
            if module not in MODULES:
                raise DataError(f"adapter entry {where}: unknown module {module!r}")
            if layer < 0:
                raise DataError(f"adapter entry {where}: negative layer index")
            if A.ndim != 2 or B.ndim != 2:
                raise DataError(f"adapter entry {where}: A and B must be matrices")
            if A.shape[0] != self.rank or B.shape[1] != self.rank:
                raise DataError(
                    f"adapter entry {where}: rank dims {A.shape[0]}/{B.shape[1]} "
                    f"disagree with bundle rank {self.rank}")
            if self.rank > min(A.shape[1], B.shape[0]):
                raise DataError(
                    f"adapter entry {where}: rank {self.rank} exceeds module dims "
                    f"({B.shape[0]}, {A.shape[1]})")
        return self

    def delta(self, layer: int, module: str) -> np.ndarray:
        """Additive update in in_out orientation (d_in x d_out)."""
        key = (layer, module)
        if key not in self.entries:
            raise DataError(f"adapter has no entry for layers.{layer}.{module}")
        A, B = self.entries[key]
        return (B @ A).T

    def layers_present(self) -> list[int]:
        return sorted({layer for layer, _ in self.entries})


def save_adapter(bundle: AdapterBundle, path: str | Path) -> None:
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


def load_adapter(path: str | Path) -> AdapterBundle:
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
    if not entries:
        raise DataError(f"adapter at {path} has no entries")
    return AdapterBundle(rank=rank, alpha=alpha, entries=entries).validate()


# ---------------------------------------------------------------------------
# activations


@dataclass
class ActivationSet:
    """Per-layer calibration activations: k batches of m x width arrays.

    All layers share the same batch count k and rows-per-batch m, and all
    batches of one layer share a width (the model's hidden size).
    """

    layers: list[list[np.ndarray]]
    corpus_id: str
    k: int
    m: int

    def validate(self) -> "ActivationSet":
        if self.k < 1 or self.m < 4:
            raise DataError(f"activation set needs k >= 1 and m >= 4, got k={self.k} m={self.m}")
        if not self.layers:
            raise DataError("activation set has no layers")
        for i, batches in enumerate(self.layers):
            if len(batches) != self.k:
                raise DataError(f"layer {i} has {len(batches)} batches, expected k={self.k}")
            width = batches[0].shape[1] if batches[0].ndim == 2 else -1
            for b, arr in enumerate(batches):
                if arr.ndim != 2 or arr.shape != (self.m, width):
                    raise DataError(
                        f"activation layer.{i}.batch.{b} has shape {arr.shape}, "
                        f"expected ({self.m}, {width})")
        return self

    @property
    def n_layers(self) -> int:
        return len(self.layers)


def save_activations(acts: ActivationSet, path: str | Path) -> None:
    acts.validate()
    tensors = {}
    for i, batches in enumerate(acts.layers):
        for b, arr in enumerate(batches):
            tensors[f"layer.{i}.batch.{b}"] = arr
    write_archive(path, tensors, metadata={
        "corpus": acts.corpus_id, "k": str(acts.k), "m": str(acts.m)})


def load_activations(path: str | Path) -> ActivationSet:
    tensors, metadata = read_archive(path)
    try:
        corpus = metadata["corpus"]
        k = int(metadata["k"])
        m = int(metadata["m"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"activation archive {path} lacks corpus/k/m metadata: {exc}") from exc
    by_layer: dict[int, dict[int, np.ndarray]] = {}
    for name, arr in tensors.items():
        parts = name.split(".")
        if len(parts) != 4 or parts[0] != "layer" or parts[2] != "batch":
            raise DataError(f"activation tensor {name!r}: expected layer.<i>.batch.<b>")
        try:
            by_layer.setdefault(int(parts[1]), {})[int(parts[3])] = arr
        except ValueError as exc:
            raise DataError(f"activation tensor {name!r}: bad index") from exc
    n_layers = len(by_layer)
    layers = []
    for i in range(n_layers):
        if i not in by_layer:
            raise DataError(f"activation archive {path} is missing layer {i}")
        batches = by_layer[i]
        if sorted(batches) != list(range(k)):
            raise DataError(f"activation archive {path}: layer {i} batches are not 0..{k - 1}")
        layers.append([batches[b] for b in range(k)])
    return ActivationSet(layers=layers, corpus_id=corpus, k=k, m=m).validate()


# ---------------------------------------------------------------------------
# vocabularies


def load_vocab(path: str | Path) -> list[str]:
    """A vocabulary is a JSON array of strings; index = embedding row."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"vocabulary file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"vocabulary {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, list) or not all(isinstance(t, str) for t in doc):
        raise DataError(f"vocabulary {path} must be a JSON array of strings")
    return doc


def save_vocab(tokens: list[str], path: str | Path) -> None:
    Path(path).write_text(json.dumps(list(tokens), ensure_ascii=False) + "\n")
