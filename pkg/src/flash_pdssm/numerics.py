"""Shared numerics: seeded counter-based RNG, tempered softmax, cross-entropy,
Adam and a central finite-difference gradient oracle.

Complex state vectors are plain numpy arrays (``complex64``/``complex128`` in
complex mode, ``float32``/``float64`` in real mode). Every gradient in the
package follows the split-component convention: for a real loss ``l`` and a
complex array ``z = a + ib`` the stored gradient is ``dl/da + i dl/db``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class InvalidInputError(ValueError):
    """Raised when an operation receives non-finite or malformed numeric input."""


def real_dtype(precision: str) -> np.dtype:
    if precision == "f32":
        return np.dtype(np.float32)
    if precision == "f64":
        return np.dtype(np.float64)
    raise ValueError(f"unknown precision {precision!r}; expected 'f32' or 'f64'")


def complex_dtype(precision: str) -> np.dtype:
    return np.result_type(real_dtype(precision), np.complex64)


def rdot(u: np.ndarray, v: np.ndarray, axis=-1) -> np.ndarray:
    """Real inner product over split components: sum(u.re*v.re + u.im*v.im)."""
    if np.iscomplexobj(u) or np.iscomplexobj(v):
        return np.sum(u.real * v.real + u.imag * v.imag, axis=axis)
    return np.sum(u * v, axis=axis)


def cmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product with explicit (re, im) arithmetic.

    numpy's vectorised complex multiply may round differently from the
    textbook formula; the compiled kernels use the textbook one, so reference
    paths that must agree bit-for-bit go through here.
    """
    if not (np.iscomplexobj(a) or np.iscomplexobj(b)):
        return a * b
    a = np.asarray(a)
    b = np.asarray(b)
    re = a.real * b.real - a.imag * b.imag
    im = a.real * b.imag + a.imag * b.real
    out = np.empty(re.shape, dtype=np.result_type(a, b))
    out.real = re
    out.imag = im
    return out


# --------------------------------------------------------------------------- rng


class Rng:
    """Counter-based splittable generator (Philox).

    ``Rng(seed).spawn(k)`` derives an independent child stream keyed by ``k``;
    the same (seed, key path) always yields the same draws, independent of
    which thread or worker consumes it.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def spawn(self, *key: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(key))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key})"


# ----------------------------------------------------------------------- softmax


def softmax_tempered(logits, temp: float, axis: int = -1) -> np.ndarray:
    """softmax(logits / temp) along ``axis``."""
    logits = np.asarray(logits)
    if logits.dtype.kind != "f":
        logits = logits.astype(np.float64)
    if not temp > 0:
        raise InvalidInputError(f"temperature must be positive, got {temp}")
    if not np.all(np.isfinite(logits)):
        raise InvalidInputError("non-finite logit")
    z = (logits - np.max(logits, axis=axis, keepdims=True)) / temp
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_jvp_t(p: np.ndarray, g: np.ndarray, temp: float, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of the tempered softmax.

    Given ``p = softmax(l / temp)`` and upstream ``g = dL/dp`` returns
    ``dL/dl = p * (g - <p, g>) / temp``. The Jacobian is symmetric, so this is
    also the Jacobian-vector product.
    """
    return p * (g - np.sum(p * g, axis=axis, keepdims=True)) / temp


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``.

    ``logits`` has shape (B, C), ``labels`` integer shape (B,).
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n_classes = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidInputError(f"label out of range [0, {n_classes})")
    lp = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    loss = -float(np.mean(lp[rows, labels]))
    grad = np.exp(lp)
    grad[rows, labels] -= 1.0
    grad /= logits.shape[0]
    return loss, grad


# -------------------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float | None = None) -> np.ndarray:
    """One bias-corrected Adam update. Returns the new parameters and advances ``state``."""
    params = np.asarray(params)
    grads = np.asarray(grads)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    lr = state.lr if lr is None else lr
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class Adam:
    """Adam over a dict of named parameters, updated in place."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict[str, AdamState] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            p = params[name]
            st = self.states.get(name)
            if st is None:
                st = self.states[name] = AdamState.zeros_like(p, lr=lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)
            p[...] = adam_step(p, g.astype(p.dtype, copy=False), st, lr=lr)

    @property
    def step_count(self) -> int:
        return max((s.step for s in self.states.values()), default=0)


# ------------------------------------------------------------- finite differences


def finite_diff_grad(f: Callable[[np.ndarray], float], p: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``p``.

    ``p`` is perturbed in place and restored, so ``f`` may close over it.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    p = np.asarray(p)
    grad = np.zeros(p.shape, dtype=np.float64)
    flat = p.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(p)
        flat[i] = orig - h
        fm = f(p)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise InvalidInputError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||, floor)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
