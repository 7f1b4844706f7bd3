"""Dimension-transfer matrices between the old and new model's spaces.

The hidden-space map W_h is the least-squares solution of
E_old[shared] @ W_h = E_new[shared] over embedding rows of tokens the
two vocabularies share. Intermediate-space maps W_i chain a projection
through W_h: W_i = pinv(P_old) @ W_h @ P_new for an up-orientation
projection P (hidden x intermediate). Down-projections are transposed
into that orientation first, giving a separate W_i per direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .linalg import pinv


@dataclass(frozen=True)
class VocabAlignment:
    """Row pairs (old_index, new_index) of shared tokens, sorted by token."""

    pairs: tuple[tuple[int, int], ...]
    shared_count: int


def vocab_intersection(vocab_old: list[str], vocab_new: list[str]) -> VocabAlignment:
    """Exact string intersection of two vocabularies.

    If a vocabulary repeats a token, its first row wins; the pair list is
    sorted by token string so the row selection is order-independent.
    """
    old_idx: dict[str, int] = {}
    for i, tok in enumerate(vocab_old):
        old_idx.setdefault(tok, i)
    new_idx: dict[str, int] = {}
    for j, tok in enumerate(vocab_new):
        new_idx.setdefault(tok, j)
    shared = sorted(set(old_idx) & set(new_idx))
    if not shared:
        raise DataError("vocabularies share no tokens; cannot align embeddings")
    pairs = tuple((old_idx[t], new_idx[t]) for t in shared)
    return VocabAlignment(pairs=pairs, shared_count=len(pairs))


def hidden_transform(E_old: np.ndarray, E_new: np.ndarray,
                     align: VocabAlignment) -> np.ndarray:
    """Least-squares hidden-space map W_h (d_old x d_new) over shared rows."""
    E_old = np.asarray(E_old, dtype=np.float64)
    E_new = np.asarray(E_new, dtype=np.float64)
    if E_old.ndim != 2 or E_new.ndim != 2:
        raise DataError("embeddings must be 2-D (vocab x hidden)")
    rows_old = [p[0] for p in align.pairs]
    rows_new = [p[1] for p in align.pairs]
    if max(rows_old) >= E_old.shape[0] or max(rows_new) >= E_new.shape[0]:
        raise DataError("alignment references embedding rows that do not exist")
    d_old = E_old.shape[1]
    if align.shared_count < d_old:
        raise DataError(
            f"{align.shared_count} shared tokens underdetermine a {d_old}-dim "
            f"hidden map; need at least {d_old}")
    A = E_old[rows_old]
    Bm = E_new[rows_new]
    return pinv(A) @ Bm


def intermediate_transform(W_proj_old: np.ndarray, W_proj_new: np.ndarray,
                           W_h: np.ndarray) -> np.ndarray:
    """Intermediate-space map W_i (i_old x i_new) for up-orientation projections."""
    W_proj_old = np.asarray(W_proj_old, dtype=np.float64)
    W_proj_new = np.asarray(W_proj_new, dtype=np.float64)
    W_h = np.asarray(W_h, dtype=np.float64)
    if W_proj_old.shape[0] != W_h.shape[0]:
        raise DataError(
            f"old projection rows {W_proj_old.shape[0]} != W_h rows {W_h.shape[0]}")
    if W_proj_new.shape[0] != W_h.shape[1]:
        raise DataError(
            f"new projection rows {W_proj_new.shape[0]} != W_h cols {W_h.shape[1]}")
    return pinv(W_proj_old) @ W_h @ W_proj_new


@dataclass
class TransferMatrices:
    """W_h (d_old x d_new), plus per-direction MLP maps when present."""

    W_h: np.ndarray
    W_i_up: np.ndarray | None = None
    W_i_down: np.ndarray | None = None


def identity_transfer(d: int) -> TransferMatrices:
    """The no-op transfer used when the hidden size is unchanged."""
    return TransferMatrices(W_h=np.eye(d))


def residual(E_old: np.ndarray, E_new: np.ndarray, align: VocabAlignment,
             W_h: np.ndarray) -> float:
    """Relative fit error of W_h on the shared rows (diagnostic)."""
    rows_old = [p[0] for p in align.pairs]
    rows_new = [p[1] for p in align.pairs]
    target = np.asarray(E_new, dtype=np.float64)[rows_new]
    pred = np.asarray(E_old, dtype=np.float64)[rows_old] @ W_h
    denom = np.linalg.norm(target)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(pred - target) / denom)
