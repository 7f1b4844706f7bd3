"""Order-preserving layer mapping by dynamic programming.

Maps every source layer i to a distinct target layer j_i with
j_0 < j_1 < ... and i <= j_i <= i + delta, maximizing the summed
similarity S[i, j_i]. dp[i][j] holds the best total ending with pair
(i, j); each cell scans the feasible predecessors k in [i-1, j-1].
Ties resolve deterministically: strict > in the max update with k
scanned ascending, and the final argmax scans j ascending, so the
first optimum found wins throughout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .cka import SimilarityMatrix
from .errors import DataError

log = logging.getLogger(__name__)

_NEG_INF = float("-inf")


@dataclass
class LayerMapping:
    """Chosen (source, target) pairs with their summed similarity.

    `ops` counts inner-loop candidate evaluations (complexity diagnostic).
    """

    pairs: tuple[tuple[int, int], ...]
    total_score: float
    delta: int
    ops: int = 0


def _as_similarity(S: np.ndarray | SimilarityMatrix) -> np.ndarray:
    if isinstance(S, SimilarityMatrix):
        S = S.validate().S
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.size == 0:
        raise DataError(f"similarity matrix must be 2-D and non-empty, got shape {S.shape}")
    if not np.isfinite(S).all():
        raise DataError("similarity matrix contains non-finite entries")
    return S


def dp_layer_mapping(S: np.ndarray | SimilarityMatrix,
                     delta: int | None = None) -> LayerMapping:
    """Optimal monotone layer mapping for l_src <= l_tgt.

    delta bounds how far a source layer may shift right; it defaults to
    l_tgt - l_src and is clamped up to that gap (with a warning) when a
    smaller value would leave the tail target layers unreachable.
    """
    S = _as_similarity(S)
    l_src, l_tgt = S.shape
    if l_src > l_tgt:
        raise DataError(
            f"dp_layer_mapping needs l_src <= l_tgt, got {l_src} > {l_tgt}; "
            f"use orient_and_map for the shrinking direction")
    gap = l_tgt - l_src
    if delta is None:
        delta = gap
    elif delta < gap:
        log.warning("delta=%d cannot reach the last target layer; clamping to %d", delta, gap)
        delta = gap

    dp = np.full((l_src, l_tgt), _NEG_INF)
    prev = np.full((l_src, l_tgt), -1, dtype=np.int64)
    ops = 0
    for j in range(0, min(delta, l_tgt - 1) + 1):
        dp[0, j] = S[0, j]
        ops += 1
    for i in range(1, l_src):
        j_hi = min(i + delta, l_tgt - 1)
        for j in range(i, j_hi + 1):
            best = _NEG_INF
            best_k = -1
            for k in range(i - 1, j):
                ops += 1
                if dp[i - 1, k] > best:
                    best = dp[i - 1, k]
                    best_k = k
            if best_k >= 0 and best > _NEG_INF:
                dp[i, j] = best + S[i, j]
                prev[i, j] = best_k
    last = dp[l_src - 1]
    best_j = -1
    best_total = _NEG_INF
    for j in range(l_tgt):
        if last[j] > best_total:
            best_total = last[j]
            best_j = j
    if best_j < 0:
        raise DataError(f"no feasible layer mapping for shapes {S.shape} with delta={delta}")
    path = [best_j]
    for i in range(l_src - 1, 0, -1):
        path.append(int(prev[i, path[-1]]))
    path.reverse()
    pairs = tuple((i, j) for i, j in enumerate(path))
    return LayerMapping(pairs=pairs, total_score=float(best_total), delta=delta, ops=ops)


def orient_and_map(S: np.ndarray | SimilarityMatrix,
                   delta: int | None = None) -> LayerMapping:
    """Layer mapping for either depth direction, reported as (old, new) pairs.

    When the old model is deeper than the new one the matrix is transposed
    and the mapping runs new -> old, so each new layer receives exactly one
    old layer's adapter; pairs still read (old, new).
    """
    S = _as_similarity(S)
    l_old, l_new = S.shape
    if l_old <= l_new:
        return dp_layer_mapping(S, delta)
    m = dp_layer_mapping(S.T, delta)
    pairs = tuple(sorted((j, i) for i, j in m.pairs))
    return LayerMapping(pairs=pairs, total_score=m.total_score, delta=m.delta, ops=m.ops)
