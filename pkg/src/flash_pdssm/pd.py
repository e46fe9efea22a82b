"""PD matrices: column-one-hot matrix P times diagonal D, stored as (idx, diag).

Column ``j`` of ``A = P D`` holds its single nonzero ``diag[j]`` at row
``idx[j]``, so applying ``A`` is a scatter-add ``y[idx[j]] += diag[j] * x[j]``.
``idx`` need not be injective; colliding columns sum in ascending ``j``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .numerics import InvalidInputError

# Elements touched by the O(N) kernels below; tests use it to check cost.
op_counter: Counter = Counter()


def index_dtype(n: int) -> np.dtype:
    """int16 indices while N < 1024, int32 beyond."""
    return np.dtype(np.int16) if n < 1024 else np.dtype(np.int32)


@dataclass(frozen=True)
class PdMatrix:
    idx: np.ndarray
    diag: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.idx)
        diag = np.asarray(self.diag)
        if idx.ndim != 1 or diag.shape != idx.shape:
            raise ValueError(f"idx and diag must be 1-D of equal length, got {idx.shape} and {diag.shape}")
        n = idx.shape[0]
        if n == 0:
            raise ValueError("empty PdMatrix")
        if idx.dtype.kind not in "iu" or idx.min() < 0 or idx.max() >= n:
            raise ValueError(f"idx entries must be integers in [0, {n})")
        if diag.dtype.kind not in "fc":
            diag = diag.astype(np.float64)
        idx = idx.astype(index_dtype(n), copy=False)
        idx.flags.writeable = False
        diag = diag.copy()
        diag.flags.writeable = False
        object.__setattr__(self, "idx", idx)
        object.__setattr__(self, "diag", diag)

    @property
    def n(self) -> int:
        return self.idx.shape[0]

    @classmethod
    def identity(cls, n: int, dtype=np.float64) -> "PdMatrix":
        return cls(np.arange(n), np.ones(n, dtype=dtype))

    def __eq__(self, other):
        if not isinstance(other, PdMatrix):
            return NotImplemented
        return np.array_equal(self.idx, other.idx) and np.array_equal(self.diag, other.diag)

    __hash__ = None


def _check_len(a: PdMatrix, v: np.ndarray, what: str) -> np.ndarray:
    v = np.asarray(v)
    if v.shape != (a.n,):
        raise ValueError(f"{what} has shape {v.shape}, expected ({a.n},)")
    return v


def pd_apply(a: PdMatrix, x) -> np.ndarray:
    """y = A x by scatter-add, ascending column order."""
    x = _check_len(a, x, "x")
    y = np.zeros(a.n, dtype=np.result_type(a.diag, x))
    np.add.at(y, a.idx, a.diag * x)
    op_counter["pd_apply"] += a.n
    return y


def pd_apply_transpose(a: PdMatrix, g) -> np.ndarray:
    """Real-linear adjoint of ``pd_apply``: out[j] = conj(diag[j]) * g[idx[j]].

    For real diagonals this is the plain transpose ``A^T g``. For complex
    diagonals the conjugate is what the split re/im convention produces, and
    it is what makes <A x, g> = <x, A^T g> hold for the real inner product.
    """
    g = _check_len(a, g, "g")
    op_counter["pd_apply_transpose"] += a.n
    return np.conj(a.diag) * g[a.idx]


def pd_compose(a2: PdMatrix, a1: PdMatrix) -> PdMatrix:
    """The PD matrix of ``a2 @ a1``."""
    if a1.n != a2.n:
        raise ValueError(f"dimension mismatch: {a2.n} vs {a1.n}")
    op_counter["pd_compose"] += a1.n
    return PdMatrix(a2.idx[a1.idx], a2.diag[a1.idx] * a1.diag)


def to_dense(a: PdMatrix) -> np.ndarray:
    out = np.zeros((a.n, a.n), dtype=a.diag.dtype)
    out[a.idx, np.arange(a.n)] = a.diag
    return out


def sparsify_column_argmax(m) -> np.ndarray:
    """Row index of the largest entry of every column (ties to the smallest row).

    Works on a single (N, N) matrix or any stack (..., N, N).
    """
    m = np.asarray(m)
    if np.iscomplexobj(m):
        m = m.real
    if np.isnan(m).any():
        raise InvalidInputError("NaN entry in dictionary matrix")
    n = m.shape[-2]
    return np.argmax(m, axis=-2).astype(index_dtype(n))
