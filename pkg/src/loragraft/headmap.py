"""Attention-head correspondence between the old and new model.

Per-head interaction matrices are basis-insensitive summaries of what a
head computes: QK_i = W_Q^i (W_K^i)^T and VO_i = W_V^i W_O^i, both
hidden x hidden. Old-model interactions are conjugated into the new
model's coordinates through the hidden-space map (W_h^T M W_h), compared
by flattened cosine, and matched one-to-one with the Hungarian algorithm
on cost = max(similarity) - similarity.

GQA models are lifted to query-head granularity first: each K/V head is
replicated group-order across the query heads that share it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .linalg import flat_cosine

INFEASIBLE = float("inf")


@dataclass
class HeadInteraction:
    """Per-head QK and VO interaction matrices, each hidden x hidden."""

    qk: list[np.ndarray]
    vo: list[np.ndarray]

    @property
    def n_heads(self) -> int:
        return len(self.qk)


@dataclass
class HeadAssignment:
    """Injective (old_head, new_head) pairs covering min(H_old, H_new).

    sim_total is the sum of the matrix entries under the selected pairs:
    cost when produced by hungarian() directly, similarity when produced
    by match_heads(). `ops` counts touched matrix elements (complexity
    diagnostic).
    """

    pairs: tuple[tuple[int, int], ...]
    sim_total: float
    ops: int = 0


def split_heads(W: np.ndarray, n_heads: int, axis: str = "column") -> list[np.ndarray]:
    """Split a projection into per-head blocks.

    Q/K/V weights (in x out) split along columns; the o-projection splits
    along rows, since its input is the concatenation of head outputs.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise DataError(f"split_heads needs a matrix, got ndim={W.ndim}")
    if axis not in ("column", "row"):
        raise DataError(f"split_heads axis must be column or row, got {axis!r}")
    dim = W.shape[1] if axis == "column" else W.shape[0]
    if n_heads < 1 or dim % n_heads != 0:
        raise DataError(f"cannot split dim {dim} into {n_heads} heads")
    return list(np.split(W, n_heads, axis=1 if axis == "column" else 0))


def replicate_kv_heads(W_K: np.ndarray, W_V: np.ndarray,
                       n_kv: int, n_q: int) -> tuple[np.ndarray, np.ndarray]:
    """Replicate grouped K/V heads to query-head granularity, group order."""
    if n_kv < 1 or n_q < 1 or n_q % n_kv != 0:
        raise DataError(f"cannot replicate {n_kv} kv heads onto {n_q} query heads "
                        f"(group size must be integral)")
    rep = n_q // n_kv

    def expand(W: np.ndarray, name: str) -> np.ndarray:
        W = np.asarray(W, dtype=np.float64)
        if W.ndim != 2 or W.shape[1] % n_kv != 0:
            raise DataError(f"{name} width {W.shape} does not hold {n_kv} kv heads")
        d, width = W.shape
        hd = width // n_kv
        blocks = W.reshape(d, n_kv, hd)
        return np.repeat(blocks, rep, axis=1).reshape(d, n_q * hd)

    return expand(W_K, "W_K"), expand(W_V, "W_V")


def group_average_kv(W: np.ndarray, n_kv: int, n_q: int) -> np.ndarray:
    """Average query-granularity K/V column blocks back to kv granularity.

    The adjoint direction of replicate_kv_heads: each new kv head's block
    is the mean over its group's replicas.
    """
    if n_kv < 1 or n_q < 1 or n_q % n_kv != 0:
        raise DataError(f"cannot group {n_q} query heads into {n_kv} kv heads")
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] % n_q != 0:
        raise DataError(f"matrix width {W.shape} does not hold {n_q} heads")
    d, width = W.shape
    hd = width // n_q
    rep = n_q // n_kv
    blocks = W.reshape(d, n_kv, rep, hd)
    return blocks.mean(axis=2).reshape(d, n_kv * hd)


def head_interactions(W_Q: np.ndarray, W_K: np.ndarray, W_V: np.ndarray,
                      W_O: np.ndarray, n_heads: int) -> HeadInteraction:
    """Per-head interaction matrices; K/V must already be query-granularity."""
    d = np.asarray(W_Q).shape[0]
    for name, W in (("W_Q", W_Q), ("W_K", W_K), ("W_V", W_V), ("W_O", W_O)):
        shape = np.asarray(W).shape
        if shape != (d, d):
            raise DataError(f"{name} must be ({d}, {d}) at query granularity, got {shape}")
    q_heads = split_heads(W_Q, n_heads, "column")
    k_heads = split_heads(W_K, n_heads, "column")
    v_heads = split_heads(W_V, n_heads, "column")
    o_heads = split_heads(W_O, n_heads, "row")
    qk = [q @ k.T for q, k in zip(q_heads, k_heads)]
    vo = [v @ o for v, o in zip(v_heads, o_heads)]
    return HeadInteraction(qk=qk, vo=vo)


def head_similarity(old: HeadInteraction, new: HeadInteraction,
                    W_h: np.ndarray | None = None) -> np.ndarray:
    """Similarity matrix (H_old x H_new) of conjugated-old vs new heads.

    Entry (i, j) averages the flattened cosines of the QK and VO
    interactions; old interactions are first mapped into new coordinates
    as W_h^T M W_h (skipped when W_h is None, i.e. unchanged hidden size).
    """
    if old.n_heads == 0 or new.n_heads == 0:
        raise DataError("head_similarity needs at least one head on each side")
    if W_h is not None:
        W_h = np.asarray(W_h, dtype=np.float64)
        d_old = old.qk[0].shape[0]
        d_new = new.qk[0].shape[0]
        if W_h.shape != (d_old, d_new):
            raise DataError(f"W_h shape {W_h.shape} does not map {d_old} -> {d_new}")
        qk_old = [W_h.T @ m @ W_h for m in old.qk]
        vo_old = [W_h.T @ m @ W_h for m in old.vo]
    else:
        if old.qk[0].shape != new.qk[0].shape:
            raise DataError("hidden sizes differ; a hidden-space map W_h is required")
        qk_old = old.qk
        vo_old = old.vo
    S = np.empty((old.n_heads, new.n_heads))
    for i in range(old.n_heads):
        for j in range(new.n_heads):
            S[i, j] = 0.5 * (flat_cosine(qk_old[i], new.qk[j])
                             + flat_cosine(vo_old[i], new.vo[j]))
    return S


def hungarian(cost: np.ndarray) -> HeadAssignment:
    """Min-cost assignment on an m x n cost matrix.

    The matrix is zero-padded to square, rows and columns are reduced,
    an initial zero matching is starred, and the cover/adjust loop runs
    until a perfect matching exists: uncovered zeros are primed, and when
    none remain the smallest uncovered value is subtracted from uncovered
    cells and added to doubly-covered ones. The result is restricted to
    real rows and columns, so exactly min(m, n) pairs come back.
    """
    C0 = np.asarray(cost, dtype=np.float64)
    if C0.ndim != 2 or C0.size == 0:
        raise DataError(f"cost matrix must be 2-D and non-empty, got shape {C0.shape}")
    if not np.isfinite(C0).all():
        raise DataError("cost matrix contains non-finite entries")
    m, n = C0.shape
    N = max(m, n)
    C = np.zeros((N, N))
    C[:m, :n] = C0
    ops = N * N

    C -= C.min(axis=1, keepdims=True)
    C -= C.min(axis=0, keepdims=True)
    ops += 4 * N * N

    star_col = np.full(N, -1, dtype=np.int64)   # row -> starred col
    star_row = np.full(N, -1, dtype=np.int64)   # col -> starred row
    prime_col = np.full(N, -1, dtype=np.int64)  # row -> primed col
    for i in range(N):
        for j in range(N):
            ops += 1
            if C[i, j] == 0.0 and star_col[i] == -1 and star_row[j] == -1:
                star_col[i] = j
                star_row[j] = i
                break

    row_cov = np.zeros(N, dtype=bool)
    col_cov = np.zeros(N, dtype=bool)

    def rescan_zeros() -> list[tuple[int, int]]:
        nonlocal ops
        ops += N * N
        rr, cc = np.nonzero((C == 0.0) & ~row_cov[:, None] & ~col_cov[None, :])
        return list(zip(rr.tolist(), cc.tolist()))

    while True:
        col_cov[:] = star_row >= 0
        ops += N
        if int(col_cov.sum()) == N:
            break
        zero_queue = rescan_zeros()
        while True:
            # pop a still-valid uncovered zero; the queue may hold stale
            # entries covered since they were pushed
            zij = None
            while zero_queue:
                i, j = zero_queue.pop()
                ops += 1
                if not row_cov[i] and not col_cov[j] and C[i, j] == 0.0:
                    zij = (i, j)
                    break
            if zij is None:
                # adjust: smallest uncovered value moves between cover classes
                urows = ~row_cov
                ucols = ~col_cov
                block = C[np.ix_(urows, ucols)]
                ops += N * N
                d = block.min()
                C[np.ix_(urows, ucols)] -= d
                C[np.ix_(row_cov, col_cov)] += d
                ops += N * N
                rr, cc = np.nonzero(C[np.ix_(urows, ucols)] == 0.0)
                ri = np.flatnonzero(urows)
                ci = np.flatnonzero(ucols)
                zero_queue.extend(zip(ri[rr].tolist(), ci[cc].tolist()))
                continue
            i, j = zij
            prime_col[i] = j
            if star_col[i] == -1:
                # augmenting path: alternate primed and starred zeros
                path = [(i, j)]
                while star_row[path[-1][1]] != -1:
                    r = int(star_row[path[-1][1]])
                    path.append((r, path[-1][1]))
                    path.append((r, int(prime_col[r])))
                ops += len(path)
                for r, c in path[1::2]:
                    star_col[r] = -1
                    star_row[c] = -1
                for r, c in path[0::2]:
                    star_col[r] = c
                    star_row[c] = r
                prime_col[:] = -1
                row_cov[:] = False
                col_cov[:] = False
                ops += N
                break
            # cover this row, uncover its starred column; zeros in that
            # column become eligible again
            c = int(star_col[i])
            row_cov[i] = True
            col_cov[c] = False
            col_zeros = np.flatnonzero((C[:, c] == 0.0) & ~row_cov)
            ops += N
            zero_queue.extend((int(r), c) for r in col_zeros)

    pairs = tuple((i, int(star_col[i])) for i in range(m) if 0 <= star_col[i] < n)
    total = sum(float(C0[i, j]) for i, j in pairs)
    return HeadAssignment(pairs=pairs, sim_total=total, ops=ops)


def match_heads(similarity: np.ndarray) -> HeadAssignment:
    """Similarity-maximizing head assignment via hungarian on max - sim."""
    S = np.asarray(similarity, dtype=np.float64)
    if S.ndim != 2 or S.size == 0:
        raise DataError(f"similarity must be 2-D and non-empty, got shape {S.shape}")
    if not np.isfinite(S).all():
        raise DataError("similarity contains non-finite entries")
    assignment = hungarian(S.max() - S)
    sim_total = sum(float(S[i, j]) for i, j in assignment.pairs)
    return HeadAssignment(pairs=assignment.pairs, sim_total=sim_total, ops=assignment.ops)


def identity_assignment(n_old: int, n_new: int,
                        similarity: np.ndarray | None = None) -> HeadAssignment:
    """Head i -> head i, used when head mapping is disabled."""
    if n_old < 1 or n_new < 1:
        raise DataError("identity_assignment needs positive head counts")
    pairs = tuple((h, h) for h in range(min(n_old, n_new)))
    total = 0.0
    if similarity is not None:
        total = sum(float(similarity[i, j]) for i, j in pairs)
    return HeadAssignment(pairs=pairs, sim_total=total, ops=0)
