from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr, solve_triangular


@dataclass
class LstsqResult:
    coef: np.ndarray
    rank: int
    rank_deficient: bool


def lstsq(X, y, rcond=None):
    """Minimum-norm least squares via QR with column pivoting.

    ``y`` may be a vector (N,) or a matrix (N, K) of right-hand sides that
    share the design; each column is solved independently. On rank
    deficiency a complete orthogonal decomposition gives the minimum-norm
    solution and ``rank_deficient`` is set.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"X must be 2-D, got shape {X.shape}")
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"row mismatch: X has {X.shape[0]} rows, y has {y.shape[0]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("lstsq input contains non-finite values")
    n, d = X.shape
    vector = y.ndim == 1
    rhs = y[:, None] if vector else y.reshape(n, -1)

    Q, R, piv = qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if rcond is None:
        rcond = max(n, d) * np.finfo(np.float64).eps
    rank = int(np.sum(diag > rcond * diag[0])) if diag.size and diag[0] > 0 else 0
    c = Q[:, :rank].T @ rhs

    w = np.zeros((d, rhs.shape[1]))
    if rank == d:
        w = solve_triangular(R[:d, :d], c)
    elif rank > 0:
        # R1 = [R11 R12]; minimum-norm solution of R1 w = c through QR of R1^T
        Q2, R2 = np.linalg.qr(R[:rank, :].T)
        w = Q2 @ solve_triangular(R2, c, trans="T")
    coef = np.empty_like(w)
    coef[piv] = w
    if vector:
        coef = coef[:, 0]
    else:
        coef = coef.reshape((d,) + y.shape[1:])
    return LstsqResult(coef=coef, rank=rank, rank_deficient=rank < d)
