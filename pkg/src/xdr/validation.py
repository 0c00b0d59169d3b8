"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def check_interactions(R, shape=None) -> sp.csr_matrix:
    """Return ``R`` as a binary CSR matrix.

    Accepts a scipy sparse matrix, a dense 0/1 array, or an ``(n, 2)`` array of
    ``(user, item)`` index pairs (``shape`` is then required).
    """
    if sp.issparse(R):
        R = sp.csr_matrix(R)
        if shape is not None and R.shape != tuple(shape):
            raise ValueError(f"interaction matrix has shape {R.shape}, expected {tuple(shape)}")
    else:
        arr = np.asarray(R)
        if arr.ndim == 2 and arr.shape[1] == 2 and shape is not None:
            pairs = check_pairs(arr, shape)
            R = sp.csr_matrix(
                (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=tuple(shape)
            )
        elif arr.ndim == 2:
            R = sp.csr_matrix(arr)
        else:
            raise ValueError("interactions must be a 2-d matrix or an (n, 2) pair array")
    R.sum_duplicates()
    R.eliminate_zeros()
    R.data[:] = 1.0
    R.sort_indices()
    return R


def check_pairs(pairs, shape=None) -> np.ndarray:
    """Validate an ``(n, 2)`` integer array of index pairs."""
    arr = np.asarray(pairs)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected an (n, 2) pair array, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError("pair indices must be integers")
    arr = arr.astype(np.int64)
    if arr.min() < 0:
        raise ValueError("negative index in pairs")
    if shape is not None:
        if arr[:, 0].max() >= shape[0] or arr[:, 1].max() >= shape[1]:
            raise ValueError(f"pair index out of range for shape {tuple(shape)}")
    return arr


def to_pairs(R: sp.spmatrix) -> np.ndarray:
    """Row-major ``(n, 2)`` array of the non-zeros of ``R``."""
    coo = sp.csr_matrix(R).tocoo()
    order = np.lexsort((coo.col, coo.row))
    return np.stack([coo.row[order], coo.col[order]], axis=1).astype(np.int64)


def check_features(X, n_rows: int, name: str) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {X.shape}")
    if X.shape[0] != n_rows:
        raise ValueError(f"{name} has {X.shape[0]} rows, expected {n_rows}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X
