"""Deterministic toy upgrade scenarios with planted ground truth.

Each scenario builds an old model, a new model derived from it by a
known transformation, and a seeded rank-4 adapter, so the full pipeline
has an exact answer to recover: which layers correspond, how heads were
permuted, and what the hidden-space map is.

Construction choices that make the planted answers analytically exact:

  * attention per-head blocks have orthonormal columns (rows for the
    o-projection), so the per-head rewrite collapses to the planted map;
  * MLP adapter updates are generated inside the base projections' own
    row/column spaces, where the intermediate-space map is lossless;
  * inserted layers are all-zero blocks, which the pre-norm residual
    stream passes through bit-exactly, so copied layers keep bit-equal
    activations;
  * hidden growth uses a row-orthonormal lift G and zero-pads the extra
    head dimensions, and attention scores are left unscaled, so grown
    models produce exactly lifted activations.

The forward pass is a small pre-norm transformer (L2-normalized stream,
softmax attention over stored q/k/v/o, tanh-approximation GELU MLP)
whose only job is to produce deterministic, architecture-faithful
activations; block outputs are mean-pooled per sequence.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .tensorio import (ActivationSet, AdapterBundle, MODULES, ModelSpec,
                       ModelWeights)

SCENARIO_KINDS = (
    "identity",
    "embed_rotation",
    "head_permutation",
    "layer_insertion",
    "hidden_growth",
    "intermediate_growth",
    "gqa_to_mha",
    "combined",
)

ADAPTER_RANK = 4
ADAPTER_ALPHA = 8.0
_SCALE = 0.02


@dataclass(frozen=True)
class GroundTruth:
    """What the pipeline should recover for one scenario."""

    layer_pairs: tuple[tuple[int, int], ...]
    head_permutation: tuple[int, ...]  # old head h -> new head perm[h]
    w_h: np.ndarray | None  # None means identity


@dataclass(frozen=True)
class Scenario:
    kind: str
    seed: int
    old_spec: ModelSpec
    new_spec: ModelSpec
    vocab_old: tuple[str, ...]
    vocab_new: tuple[str, ...]
    truth: GroundTruth


def _rng(seed: int, *tags: str) -> np.random.Generator:
    """Named deterministic stream: one generator per (seed, tag path)."""
    entropy = [seed & 0xFFFFFFFF] + [zlib.crc32(t.encode()) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _orthonormal_cols(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    A = rng.standard_normal((rows, cols))
    Q, R = np.linalg.qr(A)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs


def _vocab(size: int) -> tuple[str, ...]:
    return tuple(f"tok{i:05d}" for i in range(size))


def _base_model(spec: ModelSpec, rng: np.random.Generator) -> ModelWeights:
    d, hd = spec.hidden_size, spec.head_dim
    embedding = rng.standard_normal((spec.vocab_size, d)) / np.sqrt(d)
    layers = []
    for _ in range(spec.n_layers):
        layer = {
            "q": np.concatenate(
                [_orthonormal_cols(rng, d, hd) for _ in range(spec.n_heads)], axis=1),
            "k": np.concatenate(
                [_orthonormal_cols(rng, d, hd) for _ in range(spec.n_kv_heads)], axis=1),
            "v": np.concatenate(
                [_orthonormal_cols(rng, d, hd) for _ in range(spec.n_kv_heads)], axis=1),
            "o": np.concatenate(
                [_orthonormal_cols(rng, d, hd).T for _ in range(spec.n_heads)], axis=0),
            "up": rng.standard_normal((d, spec.intermediate_size)) / np.sqrt(d),
            "down": rng.standard_normal((spec.intermediate_size, d))
                    / np.sqrt(spec.intermediate_size),
        }
        layers.append(layer)
    return ModelWeights(spec=spec, embedding=embedding, layers=layers).validate()


def _gen_adapter(model: ModelWeights, rng: np.random.Generator) -> AdapterBundle:
    """Seeded rank-4 adapter on every layer and module.

    Attention entries are plain N(0, 0.02) factors. MLP entries are kept
    inside the base projections' row/column spaces (dW_up = X @ W_up,
    dW_down = W_down @ Y) so intermediate-space transfer is lossless.
    """
    r = ADAPTER_RANK
    spec = model.spec
    entries = {}
    for layer_idx, layer in enumerate(model.layers):
        for module in MODULES:
            d_in, d_out = spec.module_shape(module)
            tag = f"adapter:{layer_idx}:{module}"
            if module == "up":
                U = _SCALE * _rng_child(rng, tag, 0).standard_normal((spec.hidden_size, r))
                V = _SCALE * _rng_child(rng, tag, 1).standard_normal((r, spec.hidden_size))
                A = np.ascontiguousarray(U.T)
                B = layer["up"].T @ V.T
            elif module == "down":
                U = _SCALE * _rng_child(rng, tag, 0).standard_normal((spec.hidden_size, r))
                V = _SCALE * _rng_child(rng, tag, 1).standard_normal((r, spec.hidden_size))
                A = U.T @ layer["down"].T
                B = np.ascontiguousarray(V.T)
            else:
                A = _SCALE * _rng_child(rng, tag, 0).standard_normal((r, d_in))
                B = _SCALE * _rng_child(rng, tag, 1).standard_normal((d_out, r))
            entries[(layer_idx, module)] = (A, B)
    return AdapterBundle(rank=r, alpha=ADAPTER_ALPHA, entries=entries).validate()


def _rng_child(rng: np.random.Generator, tag: str, which: int) -> np.random.Generator:
    # fold the tag into the parent stream deterministically
    jump = zlib.crc32(f"{tag}:{which}".encode())
    return np.random.default_rng(np.random.SeedSequence([int(rng.integers(2**32)), jump]))


def _spec(name: str, vocab: int, d: int, inter: int, layers: int,
          heads: int, kv: int) -> ModelSpec:
    return ModelSpec(name=name, vocab_size=vocab, hidden_size=d,
                     intermediate_size=inter, n_layers=layers, n_heads=heads,
                     n_kv_heads=kv, head_dim=d // heads)


def _copy_layers(model: ModelWeights) -> list[dict[str, np.ndarray]]:
    return [{m: layer[m].copy() for m in MODULES} for layer in model.layers]


def _rotate(model: ModelWeights, R: np.ndarray, name: str) -> ModelWeights:
    """Change of hidden basis: activations become h @ R exactly."""
    layers = []
    for layer in model.layers:
        layers.append({
            "q": R.T @ layer["q"],
            "k": R.T @ layer["k"],
            "v": R.T @ layer["v"],
            "o": layer["o"] @ R,
            "up": R.T @ layer["up"],
            "down": layer["down"] @ R,
        })
    spec = ModelSpec(**{**_spec_dict(model.spec), "name": name})
    return ModelWeights(spec=spec, embedding=model.embedding @ R, layers=layers)


def _spec_dict(spec: ModelSpec) -> dict:
    return {
        "name": spec.name, "vocab_size": spec.vocab_size,
        "hidden_size": spec.hidden_size, "intermediate_size": spec.intermediate_size,
        "n_layers": spec.n_layers, "n_heads": spec.n_heads,
        "n_kv_heads": spec.n_kv_heads, "head_dim": spec.head_dim,
    }


def _permute_heads(layers: list[dict[str, np.ndarray]], perm: tuple[int, ...],
                   spec: ModelSpec) -> list[dict[str, np.ndarray]]:
    """Move head h to position perm[h]; needs query-granularity k/v."""
    if spec.n_kv_heads != spec.n_heads:
        raise DataError("head permutation scenarios need an MHA model")
    H = spec.n_heads
    out = []
    for layer in layers:
        moved = dict(layer)
        for module in ("q", "k", "v"):
            blocks = np.split(layer[module], H, axis=1)
            dest: list[np.ndarray | None] = [None] * H
            for h, blk in enumerate(blocks):
                dest[perm[h]] = blk
            moved[module] = np.concatenate(dest, axis=1)
        o_blocks = np.split(layer["o"], H, axis=0)
        dest = [None] * H
        for h, blk in enumerate(o_blocks):
            dest[perm[h]] = blk
        moved["o"] = np.concatenate(dest, axis=0)
        out.append(moved)
    return out


def _zero_layer(spec: ModelSpec) -> dict[str, np.ndarray]:
    return {m: np.zeros(spec.module_shape(m)) for m in MODULES}


def _insert_zero_layers(layers: list[dict[str, np.ndarray]], spec: ModelSpec,
                        new_depth: int, insert_at: tuple[int, ...]) -> tuple[list, tuple]:
    """Returns (new layer list, (old, new) pairs for the copied layers)."""
    out: list[dict[str, np.ndarray] | None] = [None] * new_depth
    for pos in insert_at:
        out[pos] = _zero_layer(spec)
    pairs = []
    src = iter(enumerate(layers))
    for j in range(new_depth):
        if out[j] is None:
            i, layer = next(src)
            out[j] = layer
            pairs.append((i, j))
    return out, tuple(pairs)


def _grow_hidden(model: ModelWeights, G: np.ndarray,
                 new_spec: ModelSpec, rng: np.random.Generator) -> ModelWeights:
    """Lift to a wider hidden space via row-orthonormal G, zero-padding heads."""
    so = model.spec
    hd_o, hd_n = so.head_dim, new_spec.head_dim
    pad = hd_n - hd_o
    d_new = new_spec.hidden_size

    def lift_cols(W: np.ndarray, n_blocks: int) -> np.ndarray:
        blocks = np.split(W, n_blocks, axis=1)
        lifted = [np.concatenate([G.T @ b, np.zeros((d_new, pad))], axis=1)
                  for b in blocks]
        return np.concatenate(lifted, axis=1)

    def lift_rows(W: np.ndarray, n_blocks: int) -> np.ndarray:
        blocks = np.split(W, n_blocks, axis=0)
        lifted = [np.concatenate([b @ G, np.zeros((pad, d_new))], axis=0)
                  for b in blocks]
        return np.concatenate(lifted, axis=0)

    layers = []
    for layer in model.layers:
        layers.append({
            "q": lift_cols(layer["q"], so.n_heads),
            "k": lift_cols(layer["k"], so.n_kv_heads),
            "v": lift_cols(layer["v"], so.n_kv_heads),
            "o": lift_rows(layer["o"], so.n_heads),
            "up": G.T @ layer["up"],
            "down": layer["down"] @ G,
        })
    shared = model.embedding @ G
    extra = rng.standard_normal(
        (new_spec.vocab_size - so.vocab_size, d_new)) / np.sqrt(d_new)
    embedding = np.concatenate([shared, extra], axis=0)
    return ModelWeights(spec=new_spec, embedding=embedding, layers=layers)


def gen_scenario(kind: str, seed: int) -> tuple[ModelWeights, ModelWeights,
                                                AdapterBundle, Scenario]:
    """Build (old model, new model, adapter, scenario) for one kind/seed."""
    if kind not in SCENARIO_KINDS:
        raise DataError(f"unknown scenario kind {kind!r}; choose from {SCENARIO_KINDS}")
    rng = _rng(seed, "toyforge", kind)
    small = _spec(f"toy-{kind}-old", 100, 32, 64, 3, 4, 4)
    wide = _spec(f"toy-{kind}-old", 120, 48, 96, 3, 6, 6)

    if kind == "identity":
        old = _base_model(small, rng)
        new = ModelWeights(spec=_renamed(small, f"toy-{kind}-new"),
                           embedding=old.embedding.copy(),
                           layers=_copy_layers(old))
        truth = GroundTruth(layer_pairs=((0, 0), (1, 1), (2, 2)),
                            head_permutation=(0, 1, 2, 3), w_h=None)
        scenario = Scenario(kind, seed, old.spec, new.spec,
                            _vocab(100), _vocab(100), truth)

    elif kind == "embed_rotation":
        old = _base_model(small, rng)
        R = _orthonormal_cols(_rng(seed, "toyforge", kind, "R"), 32, 32)
        new = _rotate(old, R, f"toy-{kind}-new")
        truth = GroundTruth(layer_pairs=((0, 0), (1, 1), (2, 2)),
                            head_permutation=(0, 1, 2, 3), w_h=R)
        scenario = Scenario(kind, seed, old.spec, new.spec,
                            _vocab(100), _vocab(100), truth)

    elif kind == "head_permutation":
        old = _base_model(wide, rng)
        perm = _nontrivial_permutation(_rng(seed, "toyforge", kind, "perm"), 6)
        layers = _permute_heads(_copy_layers(old), perm, old.spec)
        new = ModelWeights(spec=_renamed(wide, f"toy-{kind}-new"),
                           embedding=old.embedding.copy(), layers=layers)
        truth = GroundTruth(layer_pairs=((0, 0), (1, 1), (2, 2)),
                            head_permutation=perm, w_h=None)
        scenario = Scenario(kind, seed, old.spec, new.spec,
                            _vocab(120), _vocab(120), truth)

    elif kind == "layer_insertion":
        old = _base_model(small, rng)
        new_spec = _spec(f"toy-{kind}-new", 100, 32, 64, 5, 4, 4)
        layers, pairs = _insert_zero_layers(_copy_layers(old), small, 5, (1, 3))
        new = ModelWeights(spec=new_spec, embedding=old.embedding.copy(), layers=layers)
        truth = GroundTruth(layer_pairs=pairs, head_permutation=(0, 1, 2, 3), w_h=None)
        scenario = Scenario(kind, seed, old.spec, new.spec,
                            _vocab(100), _vocab(100), truth)

    elif kind == "hidden_growth":
        old = _base_model(small, rng)
        new_spec = _spec(f"toy-{kind}-new", 120, 48, 64, 3, 4, 4)
        G = _orthonormal_cols(_rng(seed, "toyforge", kind, "G"), 48, 32).T
        new = _grow_hidden(old, G, new_spec, _rng(seed, "toyforge", kind, "extra-rows"))
        truth = GroundTruth(layer_pairs=((0, 0), (1, 1), (2, 2)),
                            head_permutation=(0, 1, 2, 3), w_h=G)
        scenario = Scenario(kind, seed, old.spec, new.spec,
                            _vocab(100), _vocab(120), truth)

    elif kind == "intermediate_growth":
        old = _base_model(small, rng)
        new_spec = _spec(f"toy-{kind}-new", 100, 32, 96, 3, 4, 4)
        layers = []
        for layer in old.layers:
            grown = dict(layer)
            grown["up"] = np.concatenate([layer["up"], np.zeros((32, 96 - 64))], axis=1)
            grown["down"] = np.concatenate([layer["down"], np.zeros((96 - 64, 32))], axis=0)
            layers.append(grown)
        new = ModelWeights(spec=new_spec, embedding=old.embedding.copy(), layers=layers)
        truth = GroundTruth(layer_pairs=((0, 0), (1, 1), (2, 2)),
                            head_permutation=(0, 1, 2, 3), w_h=None)
        scenario = Scenario(kind, seed, old.spec, new.spec,
                            _vocab(100), _vocab(100), truth)

    elif kind == "gqa_to_mha":
        gqa = _spec(f"toy-{kind}-old", 100, 32, 64, 3, 4, 2)
        old = _base_model(gqa, rng)
        new_spec = _spec(f"toy-{kind}-new", 100, 32, 64, 3, 4, 4)
        layers = []
        for layer in old.layers:
            widened = dict(layer)
            for module in ("k", "v"):
                blocks = np.split(layer[module], 2, axis=1)
                widened[module] = np.concatenate(
                    [blocks[0], blocks[0], blocks[1], blocks[1]], axis=1)
            layers.append(widened)
        new = ModelWeights(spec=new_spec, embedding=old.embedding.copy(), layers=layers)
        truth = GroundTruth(layer_pairs=((0, 0), (1, 1), (2, 2)),
                            head_permutation=(0, 1, 2, 3), w_h=None)
        scenario = Scenario(kind, seed, old.spec, new.spec,
                            _vocab(100), _vocab(100), truth)

    elif kind == "combined":
        old = _base_model(wide, rng)
        perm = _nontrivial_permutation(_rng(seed, "toyforge", kind, "perm"), 6)
        R = _orthonormal_cols(_rng(seed, "toyforge", kind, "R"), 48, 48)
        permuted = ModelWeights(spec=old.spec, embedding=old.embedding.copy(),
                                layers=_permute_heads(_copy_layers(old), perm, old.spec))
        rotated = _rotate(permuted, R, f"toy-{kind}-new")
        new_spec = _spec(f"toy-{kind}-new", 120, 48, 96, 5, 6, 6)
        layers, pairs = _insert_zero_layers(rotated.layers, new_spec, 5, (1, 3))
        new = ModelWeights(spec=new_spec, embedding=rotated.embedding, layers=layers)
        truth = GroundTruth(layer_pairs=pairs, head_permutation=perm, w_h=R)
        scenario = Scenario(kind, seed, old.spec, new.spec,
                            _vocab(120), _vocab(120), truth)

    adapter = _gen_adapter(old, _rng(seed, "toyforge", kind, "adapter"))
    return old.validate(), new.validate(), adapter, scenario


def _renamed(spec: ModelSpec, name: str) -> ModelSpec:
    return ModelSpec(**{**_spec_dict(spec), "name": name})


def _nontrivial_permutation(rng: np.random.Generator, n: int) -> tuple[int, ...]:
    while True:
        perm = tuple(int(x) for x in rng.permutation(n))
        if perm != tuple(range(n)):
            return perm


# ---------------------------------------------------------------------------
# forward pass and capture


def _l2norm(h: np.ndarray) -> np.ndarray:
    return h / np.sqrt(np.sum(h * h, axis=-1, keepdims=True) + 1e-12)


def _gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation; elementwise and deterministic
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x ** 3)))


def _attention(x: np.ndarray, layer: dict[str, np.ndarray], spec: ModelSpec) -> np.ndarray:
    from .headmap import replicate_kv_heads

    n, L, d = x.shape
    H, hd = spec.n_heads, spec.head_dim
    W_k, W_v = replicate_kv_heads(layer["k"], layer["v"], spec.n_kv_heads, H)
    Q = (x @ layer["q"]).reshape(n, L, H, hd)
    K = (x @ W_k).reshape(n, L, H, hd)
    V = (x @ W_v).reshape(n, L, H, hd)
    scores = np.einsum("nqhd,nkhd->nhqk", Q, K)
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    mixed = np.einsum("nhqk,nkhd->nqhd", weights, V).reshape(n, L, d)
    return mixed @ layer["o"]


def forward_capture(model: ModelWeights, token_ids: np.ndarray,
                    k: int, m: int, corpus_id: str) -> ActivationSet:
    """Run the toy forward pass, capturing mean-pooled block outputs.

    token_ids is (k*m, seq_len); each sequence yields one activation row
    per layer, and rows are split into k batches of m in sequence order.
    """
    token_ids = np.asarray(token_ids)
    if token_ids.ndim != 2 or token_ids.shape[0] != k * m:
        raise DataError(f"token_ids must be (k*m, seq_len), got {token_ids.shape}")
    if token_ids.min() < 0 or token_ids.max() >= model.spec.vocab_size:
        raise DataError("token ids out of vocabulary range")
    h = model.embedding[token_ids]
    layers: list[list[np.ndarray]] = []
    for layer in model.layers:
        h = h + _attention(_l2norm(h), layer, model.spec)
        x = _l2norm(h)
        h = h + _gelu(x @ layer["up"]) @ layer["down"]
        pooled = h.mean(axis=1)
        layers.append([pooled[b * m:(b + 1) * m] for b in range(k)])
    return ActivationSet(layers=layers, corpus_id=corpus_id, k=k, m=m).validate()


def capture_pair(old: ModelWeights, new: ModelWeights, scenario: Scenario,
                 k: int = 8, m: int = 16, seq_len: int = 12
                 ) -> tuple[ActivationSet, ActivationSet]:
    """Matched calibration captures for both models on shared token ids."""
    rng = _rng(scenario.seed, "toyforge", scenario.kind, "calib")
    ids = rng.integers(0, old.spec.vocab_size, size=(k * m, seq_len))
    corpus = f"toy:{scenario.kind}:seed={scenario.seed}:len={seq_len}"
    return (forward_capture(old, ids, k, m, corpus),
            forward_capture(new, ids, k, m, corpus))


# ---------------------------------------------------------------------------
# scenario serialization (for the gen-toy CLI output)


def scenario_to_json(scenario: Scenario) -> dict:
    return {
        "kind": scenario.kind,
        "seed": scenario.seed,
        "old_model": scenario.old_spec.name,
        "new_model": scenario.new_spec.name,
        "ground_truth": {
            "layer_pairs": [list(p) for p in scenario.truth.layer_pairs],
            "head_permutation": list(scenario.truth.head_permutation),
            "w_h": (None if scenario.truth.w_h is None
                    else [[float(v) for v in row] for row in scenario.truth.w_h]),
        },
    }


def scenario_from_json(doc: dict, old_spec: ModelSpec, new_spec: ModelSpec,
                       vocab_old: tuple[str, ...], vocab_new: tuple[str, ...]) -> Scenario:
    gt = doc["ground_truth"]
    return Scenario(
        kind=doc["kind"], seed=int(doc["seed"]), old_spec=old_spec, new_spec=new_spec,
        vocab_old=vocab_old, vocab_new=vocab_new,
        truth=GroundTruth(
            layer_pairs=tuple((int(a), int(b)) for a, b in gt["layer_pairs"]),
            head_permutation=tuple(int(h) for h in gt["head_permutation"]),
            w_h=None if gt["w_h"] is None else np.array(gt["w_h"], dtype=np.float64),
        ))
