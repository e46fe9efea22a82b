"""Hard dictionary selection and its straight-through surrogate gradients.

Forward: every column of every dense dictionary matrix is reduced to the row
of its largest entry once per optimizer step (the sparse cache); per timestep
the selector logits pick one cached index array by argmax.

Backward: both argmaxes are replaced by tempered softmaxes. With
``lam = dL/dx_t``:

* selector logits get ``s_t * J(l_t)[k*, :]`` where ``s_t = <lam_t, A_t x_{t-1}>``
  and ``J`` is the tempered-softmax Jacobian;
* dictionary ``k`` gets ``sum_{t: k*_t = k} lam_t (D_t x_{t-1})^T`` pushed
  through the column-wise tempered-softmax Jacobian of ``M_k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .memory import track
from .numerics import InvalidInputError, softmax_jvp_t, softmax_tempered
from .pd import index_dtype, sparsify_column_argmax


class Dictionary:
    """K dense N x N matrices per head, stacked as (..., K, N, N), plus their
    column-argmax cache (..., K, N).

    Reads of ``dense`` are counted so tests can check that forward passes only
    touch the cache.
    """

    def __init__(self, dense: np.ndarray):
        self._dense = np.asarray(dense)
        if self._dense.ndim < 3 or self._dense.shape[-1] != self._dense.shape[-2]:
            raise ValueError(f"dictionary must have shape (..., K, N, N), got {self._dense.shape}")
        self.dense_reads = 0
        self.dirty = True
        self.sparse_cache = np.zeros(self._dense.shape[:-1], dtype=index_dtype(self.n))
        refresh_sparse_cache(self)

    @property
    def dense(self) -> np.ndarray:
        self.dense_reads += 1
        return self._dense

    @property
    def k(self) -> int:
        return self._dense.shape[-3]

    @property
    def n(self) -> int:
        return self._dense.shape[-1]

    def mark_dirty(self) -> None:
        self.dirty = True


def refresh_sparse_cache(d: Dictionary) -> Dictionary:
    """Recompute the column-argmax cache if the dense matrices changed."""
    if d.dirty:
        d.sparse_cache[...] = sparsify_column_argmax(d.dense)
        d.dirty = False
    return d


def select_hard(logits: np.ndarray) -> np.ndarray:
    """Argmax over the last axis, ties to the smallest index."""
    logits = np.asarray(logits)
    if logits.shape[-1] == 0:
        raise InvalidInputError("empty logits")
    if not np.all(np.isfinite(logits)):
        raise InvalidInputError("non-finite selector logits")
    return np.argmax(logits, axis=-1)


def gather_indices(cache: np.ndarray, kstar: np.ndarray) -> np.ndarray:
    """Per-step transition indices ``cache[h, kstar[..., h]]``.

    ``cache`` is (H, K, N) and ``kstar`` is (..., H); the result is (..., H, N).
    """
    heads = np.arange(cache.shape[0])
    return cache[heads, kstar]


def grad_selector(lam: np.ndarray, a_x: np.ndarray, logits: np.ndarray, temp: float) -> np.ndarray:
    """Surrogate dL/dlogits for every step.

    ``lam`` and ``a_x`` (= A_t x_{t-1}) are (..., N); ``logits`` is (..., K).
    """
    if not temp > 0:
        raise InvalidInputError("temperature must be positive")
    if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(a_x))):
        raise InvalidInputError("non-finite hook values")
    if np.iscomplexobj(lam) or np.iscomplexobj(a_x):
        s = np.sum(lam.real * a_x.real + lam.imag * a_x.imag, axis=-1)
    else:
        s = np.sum(lam * a_x, axis=-1)
    p = softmax_tempered(logits, temp)
    kstar = select_hard(logits)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, kstar[..., None], 1.0, axis=-1)
    # upstream gradient lands only on the selected entry
    return softmax_jvp_t(p, onehot * s[..., None], temp)


def selected_outer_sums(lam: np.ndarray, dx: np.ndarray, kstar: np.ndarray, k: int) -> np.ndarray:
    """G[h, k] = sum over steps with kstar == k of lam (dx)^T, real split inner form.

    ``lam``/``dx`` are (H, T, N), ``kstar`` is (H, T); returns (H, K, N, N).
    """
    H, T, n = lam.shape
    if np.iscomplexobj(lam) or np.iscomplexobj(dx):
        # Re(lam) Re(dx)^T + Im(lam) Im(dx)^T as one product over 2T rows
        lam = np.concatenate([lam.real, lam.imag], axis=1)
        dx = np.concatenate([np.real(dx), np.imag(dx)], axis=1)
        kstar = np.concatenate([kstar, kstar], axis=1)
    # scatter each step's lam into the block of its selected matrix
    spread = np.zeros((H, lam.shape[1], k, n), dtype=np.result_type(lam.dtype, np.float32))
    hh, tt = np.indices(kstar.shape)
    spread[hh, tt, kstar] = lam
    G = np.matmul(spread.reshape(H, -1, k * n).transpose(0, 2, 1), dx)
    return G.reshape(H, k, n, n).astype(np.float64)


def grad_dictionary(lam: np.ndarray, dx: np.ndarray, kstar: np.ndarray, d: Dictionary, temp: float) -> np.ndarray:
    """Surrogate dL/dM for every dictionary matrix, shape (H, K, N, N).

    ``lam`` holds dL/dx_t and ``dx`` holds D_t x_{t-1}, both (H, T, N); ``kstar``
    (H, T) says which matrix each step used. Every column of the result sums
    to zero.
    """
    dense = d.dense
    G = selected_outer_sums(lam, dx, kstar, d.k)
    p = softmax_tempered(dense, temp, axis=-2)
    return softmax_jvp_t(p, G, temp, axis=-2)


@dataclass(frozen=True)
class AnnealSchedule:
    temp_start: float = 1.0
    temp_end: float = 0.1
    total_steps: int = 1

    def __post_init__(self):
        if not (self.temp_start > 0 and self.temp_end > 0):
            raise ValueError("temperatures must be positive")
        if self.temp_end > self.temp_start:
            raise ValueError("temp_end must not exceed temp_start")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")


def anneal(schedule: AnnealSchedule, step: int) -> float:
    """Linear from temp_start to temp_end over total_steps, then constant."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if schedule.total_steps == 0 or step >= schedule.total_steps:
        return schedule.temp_end
    frac = step / schedule.total_steps
    return schedule.temp_start + frac * (schedule.temp_end - schedule.temp_start)


# ------------------------------------------------------ generator memory paths


def hard_select_path(u: np.ndarray, selector: np.ndarray, cache: np.ndarray) -> np.ndarray:
    """Transition indices of the hard generator for one head, tracking allocations.

    ``u`` is (L, D), ``selector`` (K, D), ``cache`` (K, N). Returns (L, N).
    """
    logits = track(u @ selector.T, "selector_logits")
    kstar = track(select_hard(logits), "kstar")
    return track(cache[kstar], "transition_idx")


def soft_select_path(u: np.ndarray, selector: np.ndarray, dense: np.ndarray) -> np.ndarray:
    """Baseline generator: softmax-weighted dictionary mix, then column hardmax.

    Materialises the (L, N, N) mixed matrices, which is what the hard path
    avoids. Shapes as in :func:`hard_select_path` with ``dense`` (K, N, N).
    """
    logits = track(u @ selector.T, "selector_logits")
    weights = track(softmax_tempered(logits, 1.0), "selector_weights")
    mixed = track(np.einsum("lk,kij->lij", weights, dense), "mixed_dictionary")
    return track(sparsify_column_argmax(mixed), "transition_idx")
