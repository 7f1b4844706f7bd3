"""Minibatch centered kernel alignment between two models' layer activations.

Similarity of two activation streams is estimated with the unbiased
HSIC statistic on linear Gram matrices, averaged over minibatches:
three running sums (cross, self-X, self-Y) are accumulated across
batches and divided once at the end,

    CKA = mean_b HSIC1(K_b, L_b)
          / sqrt(mean_b HSIC1(K_b, K_b) * mean_b HSIC1(L_b, L_b)).

Negative estimates are preserved; the unbiased statistic can dip
slightly below zero and clamping would bias layer comparisons.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError
from .tensorio import ActivationSet

# Values are CKA-like and live in [0, 1] up to estimator noise; anything
# further out than this margin indicates a broken input or computation.
SIMILARITY_MARGIN = 0.05

THREADS_ENV = "LORASUITE_THREADS"

# Degenerate-inputs guard: self-HSIC this small relative to the raw Gram
# scale means the activations are (numerically) constant and similarity
# is undefined.
_DEGENERATE_REL = 1e-12


def hsic1(K: np.ndarray, L: np.ndarray) -> float:
    """Unbiased HSIC estimate for two n x n Gram matrices, n >= 4.

    Uses zero-diagonal copies Kt, Lt:

        (1 / (n (n-3))) * [ tr(Kt Lt)
                            + (1^T Kt 1)(1^T Lt 1) / ((n-1)(n-2))
                            - (2 / (n-2)) * 1^T Kt Lt 1 ]
    """
    K = np.asarray(K, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise DataError(f"hsic1: K must be square, got {K.shape}")
    if L.shape != K.shape:
        raise DataError(f"hsic1: L shape {L.shape} != K shape {K.shape}")
    n = K.shape[0]
    if n < 4:
        raise DataError(f"hsic1 needs n >= 4, got n = {n}")
    Kt = K.copy()
    Lt = L.copy()
    np.fill_diagonal(Kt, 0.0)
    np.fill_diagonal(Lt, 0.0)
    # tr(Kt @ Lt) = sum(Kt * Lt^T); Gram inputs are symmetric so the
    # transpose is dropped. 1^T Kt Lt 1 contracts to a row-sum dot.
    trace_term = float(np.sum(Kt * Lt))
    sum_k = float(Kt.sum())
    sum_l = float(Lt.sum())
    rows_k = Kt.sum(axis=1)
    rows_l = Lt.sum(axis=1)
    cross = float(rows_k @ rows_l)
    value = (trace_term
             + sum_k * sum_l / ((n - 1.0) * (n - 2.0))
             - (2.0 / (n - 2.0)) * cross)
    return value / (n * (n - 3.0))


def _batch_stats(X: list[np.ndarray], Y: list[np.ndarray]) -> tuple[float, float, float, float]:
    """Running sums (cross, self_x, self_y) plus a Gram magnitude scale."""
    num = self_x = self_y = scale = 0.0
    n = X[0].shape[0]
    for Xb, Yb in zip(X, Y):
        K = Xb @ Xb.T
        L = Yb @ Yb.T
        num += hsic1(K, L)
        self_x += hsic1(K, K)
        self_y += hsic1(L, L)
        scale += (float(np.sum(K * K)) + float(np.sum(L * L))) / (n * (n - 3.0))
    return num, self_x, self_y, scale


def minibatch_cka(acts_x: list[np.ndarray], acts_y: list[np.ndarray]) -> float:
    """CKA between two same-length lists of (m x width) activation batches.

    Row counts must agree batchwise between the two sides; widths may
    differ. Raises NumericError when either side's mean self-HSIC is
    degenerate (constant activations make similarity undefined).
    """
    if len(acts_x) == 0 or len(acts_x) != len(acts_y):
        raise DataError(
            f"minibatch_cka: need equal nonzero batch counts, got {len(acts_x)} and {len(acts_y)}")
    m = None
    for b, (Xb, Yb) in enumerate(zip(acts_x, acts_y)):
        if Xb.ndim != 2 or Yb.ndim != 2 or Xb.shape[0] != Yb.shape[0]:
            raise DataError(f"minibatch_cka: batch {b} rows disagree "
                            f"({Xb.shape} vs {Yb.shape})")
        if m is None:
            m = Xb.shape[0]
        elif Xb.shape[0] != m:
            raise DataError(f"minibatch_cka: ragged batch rows ({Xb.shape[0]} != {m})")
    if m is None or m < 4:
        raise DataError(f"minibatch_cka needs >= 4 rows per batch, got {m}")
    k = len(acts_x)
    num, self_x, self_y, scale = _batch_stats(acts_x, acts_y)
    floor = _DEGENERATE_REL * max(scale / k, np.finfo(np.float64).tiny)
    if self_x / k <= floor or self_y / k <= floor:
        raise NumericError(
            "similarity undefined: near-zero self-HSIC (constant activations?)")
    value = (num / k) / np.sqrt((self_x / k) * (self_y / k))
    if not np.isfinite(value):
        raise NumericError("minibatch CKA produced a non-finite value")
    return float(value)


@dataclass
class SimilarityMatrix:
    """Layer-by-layer similarity S (l_old x l_new) plus its provenance."""

    S: np.ndarray
    source: str  # "cka" | "external"

    def validate(self) -> "SimilarityMatrix":
        if self.source not in ("cka", "external"):
            raise DataError(f"similarity source must be cka or external, got {self.source!r}")
        S = np.asarray(self.S, dtype=np.float64)
        if S.ndim != 2 or S.size == 0:
            raise DataError(f"similarity matrix must be 2-D and non-empty, got shape {S.shape}")
        if not np.isfinite(S).all():
            raise NumericError("similarity matrix contains non-finite entries")
        lo, hi = float(S.min()), float(S.max())
        if lo < -SIMILARITY_MARGIN or hi > 1.0 + SIMILARITY_MARGIN:
            raise NumericError(
                f"similarity entries outside [-{SIMILARITY_MARGIN}, 1+{SIMILARITY_MARGIN}]: "
                f"min={lo:.6g} max={hi:.6g}")
        return self


def _thread_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise DataError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, n)


def layer_similarity_matrix(acts_old: ActivationSet,
                            acts_new: ActivationSet) -> SimilarityMatrix:
    """All-pairs minibatch CKA between the two models' layer activations.

    Metadata must match: same calibration corpus, same (k, m). Entries are
    independent and may be computed on a small thread pool (LORASUITE_THREADS);
    each entry is written exactly once so the result does not depend on
    scheduling.
    """
    acts_old.validate()
    acts_new.validate()
    if acts_old.corpus_id != acts_new.corpus_id:
        raise DataError(
            f"activation sets come from different corpora: "
            f"{acts_old.corpus_id!r} vs {acts_new.corpus_id!r}")
    if (acts_old.k, acts_old.m) != (acts_new.k, acts_new.m):
        raise DataError(
            f"activation sets disagree on batching: k,m = "
            f"({acts_old.k},{acts_old.m}) vs ({acts_new.k},{acts_new.m})")
    l_old = acts_old.n_layers
    l_new = acts_new.n_layers
    S = np.empty((l_old, l_new))

    def fill_row(i: int) -> None:
        for j in range(l_new):
            S[i, j] = minibatch_cka(acts_old.layers[i], acts_new.layers[j])

    workers = _thread_count()
    if workers == 1:
        for i in range(l_old):
            fill_row(i)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill_row, range(l_old)))
    return SimilarityMatrix(S=S, source="cka").validate()


def write_similarity_csv(sim: SimilarityMatrix, path: str | Path) -> None:
    """CSV with old layers as rows; floats carry 17 significant digits."""
    sim.validate()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(sim.S, dtype=np.float64):
            writer.writerow([f"{v:.17g}" for v in row])


def read_similarity_csv(path: str | Path) -> SimilarityMatrix:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"similarity CSV not found: {path}")
    rows = []
    with open(path, newline="") as fh:
        for line in csv.reader(fh):
            if not line:
                continue
            try:
                rows.append([float(v) for v in line])
            except ValueError as exc:
                raise DataError(f"bad float in similarity CSV {path}: {exc}") from exc
    if not rows or any(len(r) != len(rows[0]) for r in rows):
        raise DataError(f"similarity CSV {path} is empty or ragged")
    return SimilarityMatrix(S=np.array(rows, dtype=np.float64), source="external").validate()
