"""Scan correctness/throughput grid and the generator memory comparison."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from .memory import AllocationTracker, track
from .numerics import Rng, complex_dtype, sigmoid
from .pd import sparsify_column_argmax
from .scan import ScanInput, scan_chunked, scan_sequential
from .selection import hard_select_path, soft_select_path

BENCH_COLUMNS = ("L", "N", "B", "tau", "workers", "wall_ms", "max_abs_err", "peak_aux_bytes")


def random_input(rng: Rng, B: int, L: int, n: int, precision: str = "f32") -> ScanInput:
    """Random complex permutation recurrence with |diag| in [0.8, 1)."""
    cdt = complex_dtype(precision)
    # random permutations: no column collisions, so nothing drains and chunk carries persist
    idx = np.argsort(rng.uniform(size=(B, L, n)), axis=-1)
    mag = rng.uniform(0.8, 1.0, (B, L, n))
    diag = (mag * np.exp(1j * rng.uniform(-np.pi, np.pi, (B, L, n)))).astype(cdt)
    b = (rng.normal(size=(B, L, n)) + 1j * rng.normal(size=(B, L, n))).astype(cdt)
    return ScanInput(idx, diag, b)


def _best_ms(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, (time.perf_counter() - t0) * 1e3)
    return best


def bench_row(L, N, B, tau, workers, precision="f32", repeats=3, seed=0) -> dict:
    inp = random_input(Rng(seed, (L, N, B)), B, L, N, precision)
    with AllocationTracker() as tr:
        out = scan_chunked(inp, tau, workers).states
    ref = scan_sequential(inp).states
    err = float(np.max(np.abs(out.astype(np.complex128) - ref.astype(np.complex128)))) if out.size else 0.0
    ms = _best_ms(lambda: scan_chunked(inp, tau, workers), repeats)
    return dict(L=L, N=N, B=B, tau=tau, workers=workers, wall_ms=ms, max_abs_err=err, peak_aux_bytes=tr.peak)


def bench_grid(grid: dict, precision="f32", repeats=3, seed=0) -> list[dict]:
    rows = []
    for L in grid["L"]:
        for N in grid["N"]:
            for B in grid["B"]:
                for tau in grid["tau"]:
                    for w in grid["workers"]:
                        rows.append(bench_row(L, N, B, tau, w, precision, repeats, seed))
    return rows


def speedup(L=8192, N=64, B=8, tau=128, workers=4, precision="f32", repeats=3, seed=0) -> dict:
    inp = random_input(Rng(seed, (L, N, B)), B, L, N, precision)
    scan_chunked(inp, tau, workers)  # warm the pool and the compiled kernels
    t1 = _best_ms(lambda: scan_chunked(inp, tau, 1), repeats)
    tw = _best_ms(lambda: scan_chunked(inp, tau, workers), repeats)
    return dict(L=L, N=N, B=B, tau=tau, workers=workers, ms_1=t1, ms_w=tw, speedup=t1 / tw, cpu_count=os.cpu_count())


# -------------------------------------------------------------------- memory


@dataclass
class MemoryRow:
    path: str
    L: int
    N: int
    K: int
    peak_aux_bytes: int


def generator_memory(path: str, L: int, N: int, K: int = 4, D: int = 64, seed: int = 0, tau: int = 128) -> MemoryRow:
    """Auxiliary bytes of one head's transition generator plus its scan.

    ``hard`` selects a cached index array per step; ``soft`` mixes the dense
    dictionary with softmax weights per step before sparsifying.
    """
    rng = Rng(seed, (L, N, K))
    u = rng.normal(size=(L, D))
    selector = rng.uniform(-1, 1, (K, D)) / np.sqrt(D)
    dense = rng.uniform(-1, 1, (K, N, N)) / np.sqrt(N)
    w_mag = rng.uniform(-1, 1, (N, D)) / np.sqrt(D)
    w_in = rng.uniform(-1, 1, (N, D)) / np.sqrt(D)
    cache = sparsify_column_argmax(dense)  # refreshed once per optimizer step, not per sequence
    with AllocationTracker() as tr:
        if path == "hard":
            idx = hard_select_path(u, selector, cache)
        elif path == "soft":
            idx = soft_select_path(u, selector, dense)
        else:
            raise ValueError(f"unknown path {path!r}")
        diag = track(sigmoid(u @ w_mag.T), "diag")
        b = track(u @ w_in.T, "bias")
        scan_chunked(ScanInput(idx, diag, b), tau, check=False)
    return MemoryRow(path, L, N, K, tr.peak)


def memory_scaling(L: int = 2048, sizes=(64, 128), K: int = 4) -> dict:
    rows = [generator_memory(p, L, n, K) for p in ("hard", "soft") for n in sizes]
    by = {(r.path, r.N): r.peak_aux_bytes for r in rows}
    lo, hi = sizes[0], sizes[-1]
    return {
        "rows": rows,
        "hard_ratio": by[("hard", hi)] / by[("hard", lo)],
        "soft_ratio": by[("soft", hi)] / by[("soft", lo)],
    }
