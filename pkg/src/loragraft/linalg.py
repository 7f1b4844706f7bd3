"""Dense kernels shared by the transfer and transplant stages.

Everything here is float64. The SVD-backed routines pin down the two
degrees of freedom LAPACK leaves open: a relative singular-value cutoff
for the pseudoinverse, and a deterministic sign convention for the
truncated factorization so repeated runs produce identical factors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError

DEFAULT_RCOND = 1e-10


def _as_matrix(M: np.ndarray, name: str) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise DataError(f"{name} must be a 2-D matrix, got ndim={M.ndim}")
    if not np.isfinite(M).all():
        raise DataError(f"{name} contains non-finite values")
    return M


def pinv(M: np.ndarray, rcond: float = DEFAULT_RCOND) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD.

    Singular values below rcond * sigma_max are treated as zero. An
    all-zero input maps to the all-zero matrix of transposed shape.
    """
    M = _as_matrix(M, "pinv input")
    if M.size == 0:
        raise DataError("pinv input must be non-empty")
    if not np.any(M):
        return np.zeros((M.shape[1], M.shape[0]))
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    cutoff = rcond * s[0]
    keep = s > cutoff
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (Vt.T * inv) @ U.T


@dataclass
class LowRankPair:
    """Factors B (d_out x r) and A (r x d_in) with product B @ A."""

    B: np.ndarray
    A: np.ndarray
    r: int

    def product(self) -> np.ndarray:
        return self.B @ self.A


def truncated_svd(dW: np.ndarray, r: int) -> LowRankPair:
    """Best rank-r factorization of dW, split as B = U sqrt(S), A = sqrt(S) V^T.

    The reconstruction B @ A is the Frobenius-optimal rank-r approximation;
    its squared error is the discarded tail singular energy. Signs are
    fixed deterministically: each left singular vector is flipped so its
    largest-magnitude component is positive (first index winning ties),
    with the matching right vector flipped along.
    """
    dW = _as_matrix(dW, "truncated_svd input")
    if r < 1:
        raise DataError(f"rank must be >= 1, got {r}")
    if r > min(dW.shape):
        raise DataError(f"rank {r} exceeds min(dW.shape) = {min(dW.shape)}")
    U, s, Vt = np.linalg.svd(dW, full_matrices=False)
    U, s, Vt = U[:, :r], s[:r], Vt[:r, :]
    # sign convention: dominant component of each left vector positive
    for j in range(r):
        col = U[:, j]
        lead = col[np.argmax(np.abs(col))]
        if lead < 0:
            U[:, j] = -col
            Vt[j, :] = -Vt[j, :]
    root = np.sqrt(s)
    B = U * root
    A = root[:, None] * Vt
    if not (np.isfinite(B).all() and np.isfinite(A).all()):
        raise NumericError("truncated_svd produced non-finite factors")
    return LowRankPair(B=B, A=A, r=r)


def flat_cosine(M1: np.ndarray, M2: np.ndarray) -> float:
    """Cosine of the flattened matrices; 0 whenever either norm is zero."""
    M1 = _as_matrix(M1, "flat_cosine lhs")
    M2 = _as_matrix(M2, "flat_cosine rhs")
    if M1.shape != M2.shape:
        raise DataError(f"flat_cosine shapes differ: {M1.shape} vs {M2.shape}")
    n1 = np.linalg.norm(M1)
    n2 = np.linalg.norm(M2)
    if n1 == 0.0 or n2 == 0.0:
        return 0.0
    return float(np.vdot(M1, M2) / (n1 * n2))


def gram(X: np.ndarray) -> np.ndarray:
    """Linear Gram matrix X @ X^T of a rows-are-examples activation block."""
    X = _as_matrix(X, "gram input")
    return X @ X.T
