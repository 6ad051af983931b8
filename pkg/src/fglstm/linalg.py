"""Dense double-precision linear algebra with binary group masks.

Arrays are row-major with 0-based indexing throughout; the group structure
relies on that convention (hidden unit i and input column j belong to the same
feature group exactly when i mod p == j mod p).
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError


def sigmoid(x):
    """Numerically stable logistic function; saturates instead of overflowing."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(x):
    return np.tanh(np.asarray(x, dtype=np.float64))


def build_group_mask(p: int, rows: int, cols: int) -> np.ndarray:
    """Binary mask with ones where the row and column share a residue mod p.

    With p feature groups this admits exactly the connections that keep every
    output unit wired to a single group.  p=1 yields an all-ones mask (no
    restriction); p=rows=cols yields the identity.
    """
    if p < 1:
        raise ValueError(f"group count p must be >= 1, got {p}")
    if rows < 1 or cols < 1:
        raise ValueError(f"mask shape must be positive, got {rows}x{cols}")
    r = np.arange(rows) % p
    c = np.arange(cols) % p
    return (r[:, None] == c[None, :]).astype(np.float64)


def is_group_mask(mask: np.ndarray, p: int) -> bool:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        return False
    return np.array_equal(mask, build_group_mask(p, mask.shape[0], mask.shape[1]))


def masked_matmul(W: np.ndarray, M: np.ndarray, x: np.ndarray) -> np.ndarray:
    """(W * M) @ x, the reference semantics for every masked product.

    Bit-identical to forming the Hadamard product densely first; alternate
    group-blocked execution paths must reproduce this result.
    """
    W = np.asarray(W, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.shape != M.shape:
        raise DimensionError(f"mask shape {M.shape} does not match matrix shape {W.shape}")
    if x.shape[0] != W.shape[1]:
        raise DimensionError(f"vector length {x.shape[0]} does not match {W.shape[1]} columns")
    return (W * M) @ x
