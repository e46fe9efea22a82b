"""Multi-head Flash PD-SSM block, a small stacked classifier and manual backprop.

Block (pre-norm, Mamba-style gating)::

    h      = rmsnorm(u) * norm
    per head: logits = S h, k* = argmax, P = cache[k*]
              diag = sigmoid(W_mag h + b_mag) [* exp(i W_phase h)]
              b = W_in h;  x_t = P diag x_{t-1} + b_t;  y = C Re(x_t)
    ssm    = concat_heads(y) + skip * h
    out    = u + ssm * silu(W_gate h)

The network embeds tokens, stacks blocks, applies a final RMS norm to the last
position and reads out class logits; the loss is cross-entropy on that
position only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng, complex_dtype, cross_entropy, real_dtype, sigmoid
from .scan import DEFAULT_CHUNK, ScanInput, scan_backward, scan_chunked
from .selection import Dictionary, gather_indices, grad_dictionary, grad_selector, refresh_sparse_cache, select_hard

RMS_EPS = 1e-6


class NonFiniteActivation(FloatingPointError):
    pass


class StaleCacheError(RuntimeError):
    pass


@dataclass
class NetworkConfig:
    depth: int = 2
    d_model: int = 64
    heads: int = 4
    k: int = 4
    mode: str = "complex"
    vocab: int = 2
    classes: int = 2
    precision: str = "f32"

    def __post_init__(self):
        if self.depth < 1 or self.k < 1 or self.heads < 1:
            raise ValueError("depth, heads and k must be >= 1")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.mode not in ("real", "complex"):
            raise ValueError(f"mode must be 'real' or 'complex', got {self.mode!r}")
        real_dtype(self.precision)

    @property
    def state_size(self) -> int:
        return self.d_model // self.heads


@dataclass
class LayerParams:
    norm: np.ndarray  # (D,)
    selector: np.ndarray  # (H, K, D)
    dictionary: Dictionary  # (H, K, N, N)
    w_mag: np.ndarray  # (H, N, D)
    b_mag: np.ndarray  # (H, N)
    w_phase: np.ndarray | None  # (H, N, D), complex mode only
    w_in: np.ndarray  # (H, N, D)
    w_out: np.ndarray  # (H, N, N): C_h maps head state to the head's output slice
    w_gate: np.ndarray  # (D, D)
    skip: np.ndarray  # (D,)
    x0: np.ndarray  # (H, N), not trained
    version: int = 0

    TRAINABLE = ("norm", "selector", "dictionary", "w_mag", "b_mag", "w_phase", "w_in", "w_out", "w_gate", "skip")
    SURROGATE = ("selector", "dictionary")

    @property
    def heads(self) -> int:
        return self.selector.shape[0]

    @property
    def n(self) -> int:
        return self.w_in.shape[1]

    @property
    def d_model(self) -> int:
        return self.norm.shape[0]

    @property
    def complex_mode(self) -> bool:
        return self.w_phase is not None

    def arrays(self) -> dict[str, np.ndarray]:
        """Trainable arrays by field name (the dictionary via its uncounted buffer)."""
        out = {}
        for name in self.TRAINABLE:
            if name == "dictionary":
                out[name] = self.dictionary._dense
            elif getattr(self, name) is not None:
                out[name] = getattr(self, name)
        return out

    @classmethod
    def init(cls, rng: Rng, d_model: int, heads: int, k: int, mode: str, dtype=np.float32) -> "LayerParams":
        n = d_model // heads

        def unif(bound, shape):
            return rng.uniform(-bound, bound, shape).astype(dtype)

        fan = 1.0 / math.sqrt(d_model)
        return cls(
            norm=np.ones(d_model, dtype=dtype),
            selector=unif(fan, (heads, k, d_model)),
            dictionary=Dictionary(unif(1.0 / math.sqrt(n), (heads, k, n, n))),
            w_mag=unif(fan, (heads, n, d_model)),
            # magnitudes start in sigmoid([2, 6]) ~ [0.88, 0.998]
            b_mag=rng.uniform(2.0, 6.0, (heads, n)).astype(dtype),
            w_phase=unif(fan, (heads, n, d_model)) if mode == "complex" else None,
            w_in=unif(fan, (heads, n, d_model)),
            w_out=unif(1.0 / math.sqrt(n), (heads, n, n)),
            w_gate=unif(fan, (d_model, d_model)),
            skip=np.ones(d_model, dtype=dtype),
            x0=np.zeros((heads, n), dtype=dtype),
        )


@dataclass
class LayerCache:
    version: int
    u: np.ndarray
    rms: np.ndarray
    normed: np.ndarray
    h: np.ndarray
    logits: np.ndarray
    kstar: np.ndarray
    scan_in: ScanInput
    mag: np.ndarray
    rot: np.ndarray | None
    states: np.ndarray
    ssm: np.ndarray
    z: np.ndarray
    sig_z: np.ndarray
    gate: np.ndarray


def _check(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteActivation(f"non-finite activation in {where}")


def _heads_proj(h: np.ndarray, w: np.ndarray) -> np.ndarray:
    """(..., D) x (H, M, D) -> (..., H, M)."""
    H, M, D = w.shape
    return (h @ w.reshape(H * M, D).T).reshape(h.shape[:-1] + (H, M))


def _heads_proj_t(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Transpose of :func:`_heads_proj`: (..., H, M) -> (..., D)."""
    H, M, D = w.shape
    return g.reshape(g.shape[:-2] + (H * M,)) @ w.reshape(H * M, D)


def _heads_wgrad(g: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Weight gradient of :func:`_heads_proj`: sum over leading dims of g h^T."""
    H, M = g.shape[-2:]
    D = h.shape[-1]
    return (g.reshape(-1, H * M).T @ h.reshape(-1, D)).reshape(H, M, D)


def _to_time_major(a: np.ndarray) -> np.ndarray:
    """(B, L, H, N) -> (B, H, L, N), contiguous."""
    return np.ascontiguousarray(a.transpose(0, 2, 1, 3))


def head_transitions(p: LayerParams, h: np.ndarray, cdtype):
    """Selector logits, choices, and scan inputs for every head. ``h`` is (B, L, D)."""
    logits = _heads_proj(h, p.selector)
    kstar = select_hard(logits)
    idx = gather_indices(p.dictionary.sparse_cache, kstar)
    mag = sigmoid(_heads_proj(h, p.w_mag) + p.b_mag)
    if p.complex_mode:
        rot = np.exp(1j * _heads_proj(h, p.w_phase)).astype(cdtype)
        diag = mag * rot
        bvec = _heads_proj(h, p.w_in).astype(cdtype)
    else:
        rot = None
        diag = mag
        bvec = _heads_proj(h, p.w_in)
    B = h.shape[0]
    x0 = np.broadcast_to(p.x0.astype(bvec.dtype), (B,) + p.x0.shape)
    inp = ScanInput(_to_time_major(idx), _to_time_major(diag), _to_time_major(bvec), x0)
    return logits, kstar, mag, rot, inp


def layer_forward(p: LayerParams, u: np.ndarray, chunk_size: int = DEFAULT_CHUNK, workers: int = 1):
    """Returns (out, cache); ``u`` is (B, L, D)."""
    _check(u, "layer input")
    dt = u.dtype
    cdt = np.result_type(dt, np.complex64)
    ms = np.mean(u * u, axis=-1, keepdims=True)
    rms = np.sqrt(ms + RMS_EPS).astype(dt)
    normed = u / rms
    h = normed * p.norm
    logits, kstar, mag, rot, inp = head_transitions(p, h, cdt)
    _check(inp.diag, "diagonal generator")
    states = scan_chunked(inp, chunk_size=chunk_size, workers=workers, check=False).states
    _check(states, "state scan")
    B, L, D = u.shape
    xh = states.real.transpose(1, 0, 2, 3).reshape(p.heads, B * L, p.n)
    y = np.matmul(xh, p.w_out.transpose(0, 2, 1)).reshape(p.heads, B, L, p.n).transpose(1, 2, 0, 3).reshape(B, L, D)
    ssm = y + p.skip * h
    z = h @ p.w_gate.T
    sig_z = sigmoid(z)
    gate = z * sig_z
    out = u + ssm * gate
    _check(out, "gated output")
    cache = LayerCache(p.version, u, rms, normed, h, logits, kstar, inp, mag, rot, states, ssm, z, sig_z, gate)
    return out, cache


def layer_backward(p: LayerParams, c: LayerCache, dout: np.ndarray, temp: float, workers: int = 1, st_input: bool = True):
    """Gradients for every trainable field plus dL/du.

    Selector and dictionary gradients are straight-through surrogates at
    temperature ``temp``. With ``st_input`` the selector surrogate is also
    chained into the block input through ``S^T``; without it the input
    gradient is the exact derivative of the hard forward pass.
    """
    if c.version != p.version:
        raise StaleCacheError(f"cache from parameter version {c.version}, params at {p.version}")
    B, L, D = dout.shape
    H, n = p.heads, p.n
    g = {}
    du = dout.copy()
    dssm = dout * c.gate
    dgate = dout * c.ssm
    dz = dgate * c.sig_z * (1.0 + c.z * (1.0 - c.sig_z))
    g["w_gate"] = dz.reshape(-1, D).T @ c.h.reshape(-1, D)
    dh = dz @ p.w_gate
    g["skip"] = np.sum(dssm * c.h, axis=(0, 1))
    dh += dssm * p.skip

    dy = dssm.reshape(B * L, H, n).transpose(1, 0, 2)  # (H, BL, N)
    xre = c.states.real.transpose(1, 0, 2, 3).reshape(H, B * L, n)
    g["w_out"] = np.matmul(dy.transpose(0, 2, 1), xre)
    gx = np.matmul(dy, p.w_out).reshape(H, B, L, n).transpose(1, 0, 2, 3).astype(c.states.dtype)
    sg = scan_backward(c.scan_in, c.states, gx, workers=workers)
    lam = sg.lam  # (B, H, L, N)

    # bias: b = W_in h (real input map)
    dbvec = lam.real.transpose(0, 2, 1, 3)
    g["w_in"] = _heads_wgrad(dbvec, c.h)
    dh += _heads_proj_t(dbvec, p.w_in)

    # diagonal: diag = sigmoid(a) * exp(i phi)
    gd = sg.ddiag.transpose(0, 2, 1, 3)
    dsig = c.mag * (1.0 - c.mag)
    if p.complex_mode:
        rot = c.rot
        da = (gd.real * rot.real + gd.imag * rot.imag) * dsig
        dre = c.mag * rot.real
        dim = c.mag * rot.imag
        dphi = -gd.real * dim + gd.imag * dre
        g["w_phase"] = _heads_wgrad(dphi, c.h)
        dh += _heads_proj_t(dphi, p.w_phase)
    else:
        da = gd * dsig
    g["w_mag"] = _heads_wgrad(da, c.h)
    g["b_mag"] = np.sum(da, axis=(0, 1))
    dh += _heads_proj_t(da, p.w_mag)

    # straight-through surrogates
    inp = c.scan_in
    xprev = np.concatenate([inp.x0[:, :, None, :], c.states[:, :, :-1, :]], axis=2)
    a_x = c.states - inp.b
    dlogits = grad_selector(lam, a_x, c.logits.transpose(0, 2, 1, 3), temp).transpose(0, 2, 1, 3)
    g["selector"] = _heads_wgrad(dlogits, c.h)
    if st_input:
        dh += _heads_proj_t(dlogits, p.selector)
    dx = inp.diag * xprev
    lam_h = lam.transpose(1, 0, 2, 3).reshape(H, B * L, n)
    dx_h = dx.transpose(1, 0, 2, 3).reshape(H, B * L, n)
    k_h = c.kstar.transpose(2, 0, 1).reshape(H, B * L)
    g["dictionary"] = grad_dictionary(lam_h, dx_h, k_h, p.dictionary, temp)

    # pre-norm
    g["norm"] = np.sum(dh * c.normed, axis=(0, 1))
    dn = dh * p.norm
    du += (dn - c.normed * np.mean(dn * c.normed, axis=-1, keepdims=True)) / c.rms
    dt = dout.dtype
    return {k: v.astype(dt, copy=False) for k, v in g.items()}, du


# --------------------------------------------------------------------- network


@dataclass
class Network:
    config: NetworkConfig
    embed: np.ndarray  # (V, D)
    layers: list[LayerParams]
    final_norm: np.ndarray  # (D,)
    readout_w: np.ndarray  # (C, D)
    readout_b: np.ndarray  # (C,)
    seed: int = 0
    chunk_size: int = DEFAULT_CHUNK
    workers: int = 1
    kind: str = field(default="network", init=False)

    @classmethod
    def init(cls, config: NetworkConfig, seed: int) -> "Network":
        rng = Rng(seed).spawn(0)
        dt = real_dtype(config.precision)
        D = config.d_model
        layers = [
            LayerParams.init(rng.spawn(1, i), D, config.heads, config.k, config.mode, dt) for i in range(config.depth)
        ]
        r = rng.spawn(2)
        return cls(
            config=config,
            embed=r.normal(0.0, 1.0, (config.vocab, D)).astype(dt),
            layers=layers,
            final_norm=np.ones(D, dtype=dt),
            # small readout so the untrained loss starts at ~ln(classes)
            readout_w=r.uniform(-0.1 / math.sqrt(D), 0.1 / math.sqrt(D), (config.classes, D)).astype(dt),
            readout_b=np.zeros(config.classes, dtype=dt),
            seed=seed,
        )

    def parameters(self) -> dict[str, np.ndarray]:
        out = {"embed": self.embed, "final_norm": self.final_norm, "readout_w": self.readout_w, "readout_b": self.readout_b}
        for i, lp in enumerate(self.layers):
            for name, arr in lp.arrays().items():
                out[f"layers.{i}.{name}"] = arr
        return out

    def surrogate_names(self) -> list[str]:
        return [f"layers.{i}.{s}" for i in range(len(self.layers)) for s in LayerParams.SURROGATE]

    def refresh(self) -> None:
        for lp in self.layers:
            refresh_sparse_cache(lp.dictionary)

    def mark_updated(self) -> None:
        """Call after mutating parameters in place."""
        for lp in self.layers:
            lp.dictionary.mark_dirty()
            lp.version += 1

    def copy(self) -> "Network":
        layers = []
        for lp in self.layers:
            d = Dictionary(lp.dictionary._dense.copy())
            kw = {f: (None if getattr(lp, f) is None else getattr(lp, f).copy()) for f in (
                "norm", "selector", "w_mag", "b_mag", "w_phase", "w_in", "w_out", "w_gate", "skip", "x0")}
            layers.append(LayerParams(dictionary=d, **kw))
        return Network(self.config, self.embed.copy(), layers, self.final_norm.copy(), self.readout_w.copy(),
                       self.readout_b.copy(), self.seed, self.chunk_size, self.workers)

    # -- forward / backward

    def forward(self, tokens: np.ndarray):
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab):
            raise ValueError(f"token ids must lie in [0, {self.config.vocab})")
        self.refresh()
        u = self.embed[tokens]
        caches = []
        for lp in self.layers:
            u, c = layer_forward(lp, u, self.chunk_size, self.workers)
            caches.append(c)
        last = u[:, -1]
        rms = np.sqrt(np.mean(last * last, axis=-1, keepdims=True) + RMS_EPS).astype(last.dtype)
        normed = last / rms
        logits = (normed * self.final_norm) @ self.readout_w.T + self.readout_b
        return logits, (tokens, u, caches, rms, normed)

    def logits(self, tokens: np.ndarray) -> np.ndarray:
        return self.forward(tokens)[0]

    def predict(self, tokens: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(tokens), axis=-1)

    def loss_and_grads(self, tokens, labels, temp: float, st_input: bool = True):
        logits, (tokens, u, caches, rms, normed) = self.forward(tokens)
        loss, dlogits = cross_entropy(logits.astype(np.float64), labels)
        dlogits = dlogits.astype(logits.dtype)
        hf = normed * self.final_norm
        grads = {
            "readout_w": dlogits.T @ hf,
            "readout_b": dlogits.sum(axis=0),
        }
        dhf = dlogits @ self.readout_w
        grads["final_norm"] = np.sum(dhf * normed, axis=0)
        dn = dhf * self.final_norm
        dlast = (dn - normed * np.mean(dn * normed, axis=-1, keepdims=True)) / rms
        du = np.zeros_like(u)
        du[:, -1] = dlast
        for i in range(len(self.layers) - 1, -1, -1):
            g, du = layer_backward(self.layers[i], caches[i], du, temp, self.workers, st_input)
            for k, v in g.items():
                grads[f"layers.{i}.{k}"] = v
        dembed = np.zeros_like(self.embed)
        np.add.at(dembed, tokens, du)
        grads["embed"] = dembed
        return loss, grads


def dictionary_param_count(d_model: int, heads: int, k: int) -> int:
    n = d_model // heads
    return heads * k * n * n


def dtype_pair(precision: str):
    return real_dtype(precision), complex_dtype(precision)
