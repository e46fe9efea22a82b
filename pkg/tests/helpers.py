"""Shared instance generators and dense oracles for the test suite."""

import numpy as np

from flash_pdssm.scan import ScanInput


def random_scan_input(rng, L, n, batch=(), complex_=True, dtype=None, x0=True, perm=False):
    """Random PD recurrence whose transitions have row sums of |diag| below 1.

    Colliding columns share their row's budget, so states stay O(1) even for
    many-to-one index maps. Such maps drain quickly, so ``perm=True`` draws
    permutations with |diag| in [0.8, 1) instead: long memory, carries matter.
    """
    shape = tuple(batch) + (L, n)
    if perm:
        idx = np.argsort(rng.uniform(size=shape), axis=-1)
        mag = rng.uniform(0.8, 1.0, shape)
    else:
        idx = rng.integers(0, n, shape)
        counts = np.zeros(shape, dtype=np.int64)
        flat_idx = idx.reshape(-1, n)
        flat_cnt = counts.reshape(-1, n)
        for r in range(flat_idx.shape[0]):
            flat_cnt[r] = np.bincount(flat_idx[r], minlength=n)[flat_idx[r]]
        mag = rng.uniform(0.2, 0.9, shape) / counts
    b = rng.uniform(-1, 1, shape)
    x0v = rng.uniform(-1, 1, tuple(batch) + (n,)) if x0 else None
    if complex_:
        diag = mag * np.exp(1j * rng.uniform(-np.pi, np.pi, shape))
        b = b + 1j * rng.uniform(-1, 1, shape)
        if x0v is not None:
            x0v = x0v + 1j * rng.uniform(-1, 1, x0v.shape)
    else:
        diag = mag * rng.choice([-1.0, 1.0], shape)
    if dtype is not None:
        diag, b = diag.astype(dtype), b.astype(dtype)
        x0v = None if x0v is None else x0v.astype(dtype)
    return ScanInput(idx, diag, b, x0v)


def dense_transition(idx, diag):
    n = idx.shape[-1]
    a = np.zeros((n, n), dtype=np.result_type(diag, np.float64))
    for j in range(n):
        a[idx[j], j] += diag[j]
    return a


def dense_fold(inp: ScanInput):
    """Dense-matrix left fold for an unbatched ScanInput."""
    x = inp.x0.astype(np.complex128)
    out = []
    for t in range(inp.length):
        x = dense_transition(inp.idx[t], inp.diag[t]) @ x + inp.b[t]
        out.append(x)
    return np.array(out)
