"""Linear recurrence x_t = A_t x_{t-1} + b_t with PD transitions.

``scan_sequential`` is the plain left fold and serves as the oracle for
``scan_chunked``, the three-phase chunkwise scan:

* Phase A folds every chunk into an aggregate (pi, d, bias) using PD
  composition, so the aggregate costs O(N) per step.
* Phase B walks the chunks of each sequence in order, turning aggregates
  into carries (the exact state entering each chunk). Carry_0 is ``x0``.
* Phase C replays every chunk from its carry. ``mode="literal"`` instead adds
  the prefix operator applied to the carry onto zero-initialised local states.

All arrays may carry leading batch dimensions: ``idx``, ``diag`` and ``b`` are
(..., L, N), ``x0`` is (..., N). Phases A and C run over (row, chunk) work
items on a thread pool; the split never changes the result.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels as K
from .memory import track
from .numerics import InvalidInputError, cmul
from .pd import PdMatrix, index_dtype

DEFAULT_CHUNK = 128


@dataclass
class ScanInput:
    idx: np.ndarray
    diag: np.ndarray
    b: np.ndarray
    x0: np.ndarray | None = None

    def __post_init__(self):
        self.idx = np.asarray(self.idx)
        diag = np.asarray(self.diag)
        b = np.asarray(self.b)
        if diag.shape != self.idx.shape or b.shape != self.idx.shape:
            raise ValueError(f"idx {self.idx.shape}, diag {diag.shape}, b {b.shape} must share a shape")
        if self.idx.ndim < 2:
            raise ValueError("expected arrays of shape (..., L, N)")
        n = self.idx.shape[-1]
        x0 = np.zeros(self.idx.shape[:-2] + (n,), dtype=b.dtype) if self.x0 is None else np.asarray(self.x0)
        if x0.shape != self.idx.shape[:-2] + (n,):
            raise ValueError(f"x0 has shape {x0.shape}, expected {self.idx.shape[:-2] + (n,)}")
        dtype = np.result_type(diag, b, x0)
        if dtype.kind not in "fc":
            dtype = np.result_type(dtype, np.float64)
        if self.idx.dtype.kind not in "iu":
            raise ValueError("idx must be integer")
        if self.idx.size and (self.idx.min() < 0 or self.idx.max() >= n):
            raise ValueError(f"idx entries must lie in [0, {n})")
        self.idx = self.idx.astype(index_dtype(n), copy=False)
        self.diag = diag.astype(dtype, copy=False)
        self.b = b.astype(dtype, copy=False)
        self.x0 = x0.astype(dtype, copy=False)

    @property
    def length(self) -> int:
        return self.idx.shape[-2]

    @property
    def n(self) -> int:
        return self.idx.shape[-1]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.idx.shape[:-2]

    def check_finite(self) -> None:
        for name in ("diag", "b", "x0"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidInputError(f"non-finite values in {name}")

    def flat(self):
        L, n = self.length, self.n
        return (
            np.ascontiguousarray(self.idx.reshape(-1, L, n)),
            np.ascontiguousarray(self.diag.reshape(-1, L, n)),
            np.ascontiguousarray(self.b.reshape(-1, L, n)),
            np.ascontiguousarray(self.x0.reshape(-1, n)),
        )

    def step(self, t: int) -> PdMatrix:
        """Transition at step ``t`` (unbatched input only)."""
        if self.batch_shape:
            raise ValueError("step() needs an unbatched ScanInput")
        return PdMatrix(self.idx[t], self.diag[t])


@dataclass
class ChunkAggregate:
    pi: np.ndarray
    d: np.ndarray
    bias: np.ndarray

    def as_pd(self) -> PdMatrix:
        return PdMatrix(self.pi, self.d)


@dataclass
class ScanOutput:
    states: np.ndarray


# ---------------------------------------------------------------- reference fold


def scan_sequential(inp: ScanInput) -> ScanOutput:
    """Left fold of the recurrence, vectorised over batch rows."""
    inp.check_finite()
    idx, diag, b, x0 = inp.flat()
    R, L, n = idx.shape
    states = np.empty((R, L, n), dtype=b.dtype)
    rows = np.arange(R)[:, None]
    x = x0
    for t in range(L):
        y = np.zeros((R, n), dtype=b.dtype)
        np.add.at(y, (rows, idx[:, t]), cmul(diag[:, t], x))
        x = y + b[:, t]
        states[:, t] = x
    return ScanOutput(states.reshape(inp.idx.shape))


# ------------------------------------------------------------------ work pool


@lru_cache(maxsize=None)
def _pool(workers: int) -> ThreadPoolExecutor:
    return ThreadPoolExecutor(max_workers=workers, thread_name_prefix="pdscan")


def _run_items(kernel, rows: np.ndarray, chunks: np.ndarray, workers: int, *args):
    """Call ``kernel(*args_before, rows, chunks, *args_after)`` over work-item blocks."""
    pre, post = args
    if workers <= 1 or rows.size <= 1:
        kernel(*pre, rows, chunks, *post)
        return
    n_blocks = min(rows.size, workers * 4)
    bounds = np.linspace(0, rows.size, n_blocks + 1).astype(np.int64)
    futs = [
        _pool(workers).submit(kernel, *pre, rows[lo:hi], chunks[lo:hi], *post)
        for lo, hi in zip(bounds[:-1], bounds[1:])
        if hi > lo
    ]
    for f in futs:
        f.result()


def _items(R: int, C: int) -> tuple[np.ndarray, np.ndarray]:
    rr, cc = np.meshgrid(np.arange(R, dtype=np.int64), np.arange(C, dtype=np.int64), indexing="ij")
    return rr.ravel(), cc.ravel()


# ------------------------------------------------------------- the three phases


def _phase_a(idx, diag, b, chunk_size, workers, skip_last=False):
    R, L, n = idx.shape
    C = math.ceil(L / chunk_size)
    pi = track(np.empty((R, C, n), dtype=np.int64 if n >= 1024 else np.int32), "aggregate_pi")
    d = track(np.empty((R, C, n), dtype=diag.dtype), "aggregate_d")
    bias = track(np.empty((R, C, n), dtype=b.dtype), "aggregate_bias")
    # the last chunk's aggregate feeds no carry; its slot is left unset
    rows, chunks = _items(R, C - 1 if skip_last else C)
    _run_items(K.phase_a, rows, chunks, workers, (idx, diag, b), (chunk_size, pi, d, bias))
    return pi, d, bias


def chunk_aggregate(inp: ScanInput, start: int = 0, stop: int | None = None) -> tuple[ChunkAggregate, np.ndarray]:
    """Aggregate of steps [start, stop) plus the local states from a zero state.

    Unbatched input only; the aggregate satisfies
    ``x_stop = pd_apply(agg.as_pd(), x_start) + agg.bias``.
    """
    if inp.batch_shape:
        raise ValueError("chunk_aggregate works on a single sequence")
    stop = inp.length if stop is None else stop
    if not 0 <= start < stop <= inp.length:
        raise ValueError("chunk must contain at least one step")
    sub = ScanInput(inp.idx[start:stop], inp.diag[start:stop], inp.b[start:stop])
    idx, diag, b, _ = sub.flat()
    pi, d, bias = _phase_a(idx, diag, b, stop - start, 1)
    local = np.empty_like(b)
    zero = np.zeros((1, 1, sub.n), dtype=b.dtype)
    K.phase_c_replay(idx, diag, b, zero, np.zeros(1, np.int64), np.zeros(1, np.int64), stop - start, local)
    return ChunkAggregate(pi[0, 0], d[0, 0], bias[0, 0]), local[0]


def carry_propagate(aggregates: list[ChunkAggregate], x0) -> list[np.ndarray]:
    """Carry_0 = x0, Carry_c = bias_{c-1} + A_{c-1} Carry_{c-1}."""
    x0 = np.asarray(x0)
    dtype = np.result_type(x0, *[a.d for a in aggregates], *[a.bias for a in aggregates])
    pi = np.stack([a.pi for a in aggregates])[None]
    d = np.stack([a.d for a in aggregates]).astype(dtype)[None]
    bias = np.stack([a.bias for a in aggregates]).astype(dtype)[None]
    carry = np.empty((1, len(aggregates), x0.shape[0]), dtype=dtype)
    K.phase_b(pi, d, bias, x0.astype(dtype)[None], carry)
    return list(carry[0])


def apply_carry(local_states: np.ndarray, chunk: ScanInput, carry, mode: str = "replay") -> np.ndarray:
    """Correct one chunk's zero-start local states given the true entering state.

    ``replay`` re-runs the chunk from ``carry`` and ignores ``local_states``;
    ``literal`` adds the running prefix operator applied to ``carry`` to them.
    """
    if chunk.batch_shape:
        raise ValueError("apply_carry works on a single chunk")
    idx, diag, b, _ = chunk.flat()
    carry = np.asarray(carry, dtype=b.dtype)
    if mode == "replay":
        out = np.empty_like(b)
        one = np.zeros(1, np.int64)
        K.phase_c_replay(idx, diag, b, carry.reshape(1, 1, -1), one, one, chunk.length, out)
        return out[0]
    if mode != "literal":
        raise ValueError(f"unknown mode {mode!r}")
    local = np.asarray(local_states)
    n = chunk.n
    pi = np.arange(n)
    d = np.ones(n, dtype=diag.dtype)
    out = np.empty_like(local, dtype=np.result_type(local, b))
    for t in range(chunk.length):
        d = diag[0, t][pi] * d
        pi = idx[0, t][pi]
        corr = np.zeros(n, dtype=out.dtype)
        np.add.at(corr, pi, d * carry)
        out[t] = local[t] + corr
    return out


def scan_chunked(
    inp: ScanInput,
    chunk_size: int = DEFAULT_CHUNK,
    workers: int = 1,
    mode: str = "replay",
    debug: bool = False,
    check: bool = True,
) -> ScanOutput:
    """Three-phase chunkwise scan. Equals ``scan_sequential`` up to rounding;
    bit-identical across worker counts."""
    if chunk_size < 1 or workers < 1:
        raise ValueError("chunk_size and workers must be >= 1")
    if check:
        inp.check_finite()
    idx, diag, b, x0 = inp.flat()
    R, L, n = idx.shape
    pi, d, bias = _phase_a(idx, diag, b, chunk_size, workers, skip_last=True)
    C = pi.shape[1]
    carry = track(np.empty((R, C, n), dtype=b.dtype), "carry")
    K.phase_b(pi, d, bias, x0, carry)
    out = track(np.empty((R, L, n), dtype=b.dtype), "states")
    rows, chunks = _items(R, C)
    kernel = {"replay": K.phase_c_replay, "literal": K.phase_c_literal}.get(mode)
    if kernel is None:
        raise ValueError(f"unknown mode {mode!r}")
    _run_items(kernel, rows, chunks, workers, (idx, diag, b, carry), (chunk_size, out))
    if debug:
        other = np.empty_like(out)
        alt = K.phase_c_literal if mode == "replay" else K.phase_c_replay
        alt(idx, diag, b, carry, rows, chunks, chunk_size, other)
        scale = max(1.0, float(np.max(np.abs(out), initial=0.0)))
        tol = 1e-4 if out.real.dtype == np.float32 else 1e-9
        if not np.allclose(out, other, rtol=0, atol=tol * scale):
            raise AssertionError("replay and literal carry corrections disagree")
    return ScanOutput(out.reshape(inp.idx.shape))


# ------------------------------------------------------------------- adjoint


@dataclass
class ScanGrads:
    """Gradients of a scalar loss through the recurrence.

    ``lam[t]`` is the total dL/dx_t; it doubles as dL/db_t.
    """

    dx0: np.ndarray
    ddiag: np.ndarray
    lam: np.ndarray

    @property
    def db(self) -> np.ndarray:
        return self.lam


def scan_backward(inp: ScanInput, states: np.ndarray, gx: np.ndarray, workers: int = 1) -> ScanGrads:
    """Reverse-mode pass given forward ``states`` and direct dL/dx_t ``gx``."""
    states = np.asarray(states)
    gx = np.asarray(gx)
    if states.shape != inp.idx.shape or gx.shape != inp.idx.shape:
        raise ValueError(f"states {states.shape} and gx {gx.shape} must match {inp.idx.shape}")
    idx, diag, b, x0 = inp.flat()
    R, L, n = idx.shape
    dtype = np.result_type(b, gx)
    st = np.ascontiguousarray(states.reshape(R, L, n).astype(dtype, copy=False))
    g = np.ascontiguousarray(gx.reshape(R, L, n).astype(dtype, copy=False))
    lam = np.empty((R, L, n), dtype=dtype)
    ddiag = np.empty((R, L, n), dtype=dtype)
    dx0 = np.empty((R, n), dtype=dtype)
    rows = np.arange(R, dtype=np.int64)
    _run_items(
        K.backward, rows, rows, workers,
        (idx, diag.astype(dtype, copy=False), st, x0.astype(dtype, copy=False), g),
        (lam, ddiag, dx0),
    )
    shape = inp.idx.shape
    return ScanGrads(dx0.reshape(shape[:-2] + (n,)), ddiag.reshape(shape), lam.reshape(shape))


def scan_hooks(inp: ScanInput, states: np.ndarray, grads: ScanGrads):
    """Per-step tuples (lam_t, D_t x_{t-1}, x_{t-1}) for the selection gradients."""
    xprev = previous_states(inp, states)
    return grads.lam, inp.diag * xprev, xprev


def previous_states(inp: ScanInput, states: np.ndarray) -> np.ndarray:
    """x_{t-1} for every t, i.e. states shifted right by one with x0 in front."""
    return np.concatenate([inp.x0[..., None, :].astype(states.dtype), states[..., :-1, :]], axis=-2)


def default_workers() -> int:
    return max(1, min(8, os.cpu_count() or 1))
