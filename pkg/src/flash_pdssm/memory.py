"""Allocation accounting for the scan and selection paths.

Allocation sites call :func:`track` on the auxiliary arrays they create. When
an :class:`AllocationTracker` is active, live and peak byte counts are
recorded; otherwise ``track`` is a no-op. This measures the algorithmic
footprint, independent of allocator or RSS noise.
"""

from __future__ import annotations

import contextvars
from collections import defaultdict

import numpy as np

_active: contextvars.ContextVar["AllocationTracker | None"] = contextvars.ContextVar("alloc_tracker", default=None)


class AllocationTracker:
    def __init__(self):
        self.live = 0
        self.peak = 0
        self.by_label: dict[str, int] = defaultdict(int)
        self._token = None

    def add(self, nbytes: int, label: str) -> None:
        self.live += nbytes
        self.by_label[label] += nbytes
        self.peak = max(self.peak, self.live)

    def release(self, nbytes: int) -> None:
        self.live -= nbytes

    def __enter__(self) -> "AllocationTracker":
        self._token = _active.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.reset(self._token)


def track(arr: np.ndarray, label: str) -> np.ndarray:
    tr = _active.get()
    if tr is not None:
        tr.add(arr.nbytes, label)
    return arr


def release(arr: np.ndarray) -> None:
    tr = _active.get()
    if tr is not None:
        tr.release(arr.nbytes)
