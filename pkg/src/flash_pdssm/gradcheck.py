"""Dense per-timestep reference network and finite-difference gradient checks.

The reference recomputes a :class:`~flash_pdssm.model.Network` with explicit
N x N transition matrices and a Python loop over time, sharing no code with
the scan engine. It runs in one of five selection modes:

``hard``
    argmax selection and column hardmax, i.e. the production forward pass.
``st``
    straight-through relaxation around a base point: the choice k* and the
    column argmaxes stay frozen, and the tempered softmaxes enter as
    first-order corrections, ``A = (1 + p_k*(l) - p_k*(l0)) *
    (hard(M0) + csm(M) - csm(M0)) * D``. Its value equals the hard model at
    the base point and its exact gradient is the surrogate gradient.
``soft``
    every argmax replaced by its tempered softmax,
    ``A = sum_k p_k(l) csm(M_k) D``.
``csm``
    hard choice k*, softened columns: ``A = csm(M_k*) D``.
``sel``
    softened choice, hard columns: ``A = sum_k p_k(l) hard(M_k) D``.

In the formulas ``csm`` is the column-wise tempered softmax and ``hard`` the
column hardmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import RMS_EPS, LayerParams, Network, NetworkConfig
from .numerics import Rng, finite_diff_grad, rel_error

TOL = 1e-3
DEFAULT_TEMPS = (1.0, 0.3, 0.1)


def _softmax(v, temp, axis=-1):
    z = (v - v.max(axis=axis, keepdims=True)) / temp
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _hardmax_cols(m):
    out = np.zeros_like(m)
    out[np.argmax(m, axis=0), np.arange(m.shape[1])] = 1.0
    return out


def _sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def dense_layer(p: LayerParams, u, relax="hard", temp=1.0, ref=None, record=None):
    """Reference block forward for ``u`` of shape (B, L, D)."""
    B, L, D = u.shape
    H, N = p.heads, p.n
    M = p.dictionary._dense
    rms = np.sqrt(np.mean(u * u, axis=-1, keepdims=True) + RMS_EPS)
    h = u / rms * p.norm
    y = np.zeros((B, L, D))
    logits_all = np.zeros((B, L, H, p.selector.shape[1]))
    for b in range(B):
        for hd in range(H):
            x = p.x0[hd].astype(np.complex128)
            for t in range(L):
                ht = h[b, t]
                lg = p.selector[hd] @ ht
                logits_all[b, t, hd] = lg
                mag = _sig(p.w_mag[hd] @ ht + p.b_mag[hd])
                diag = mag * np.exp(1j * (p.w_phase[hd] @ ht)) if p.complex_mode else mag.astype(np.complex128)
                if relax == "hard":
                    P = _hardmax_cols(M[hd, np.argmax(lg)])
                elif relax == "st":
                    k = ref["kstar"][b, t, hd]
                    M0 = ref["dict"][hd, k]
                    w = 1.0 + _softmax(lg, temp)[k] - _softmax(ref["logits"][b, t, hd], temp)[k]
                    P = w * (_hardmax_cols(M0) + _softmax(M[hd, k], temp, 0) - _softmax(M0, temp, 0))
                elif relax == "csm":
                    P = _softmax(M[hd, np.argmax(lg)], temp, 0)
                elif relax == "sel":
                    pk = _softmax(lg, temp)
                    P = sum(pk[k] * _hardmax_cols(M[hd, k]) for k in range(M.shape[1]))
                elif relax == "soft":
                    pk = _softmax(lg, temp)
                    P = sum(pk[k] * _softmax(M[hd, k], temp, 0) for k in range(M.shape[1]))
                else:
                    raise ValueError(f"unknown relaxation {relax!r}")
                x = (P * diag[None, :]) @ x + p.w_in[hd] @ ht
                y[b, t, hd * N:(hd + 1) * N] = p.w_out[hd] @ x.real
    if record is not None:
        record.append({"logits": logits_all, "kstar": np.argmax(logits_all, axis=-1), "dict": M.copy()})
    z = h @ p.w_gate.T
    return u + (y + p.skip * h) * (z * _sig(z))


def dense_loss(net: Network, tokens, labels, relax="hard", temp=1.0, refs=None, record=None) -> float:
    u = net.embed[tokens].astype(np.float64)
    for i, lp in enumerate(net.layers):
        u = dense_layer(lp, u, relax, temp, None if refs is None else refs[i], record)
    last = u[:, -1]
    hf = last / np.sqrt(np.mean(last * last, axis=-1, keepdims=True) + RMS_EPS) * net.final_norm
    logits = hf @ net.readout_w.T + net.readout_b
    m = logits.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))[:, 0]
    return float(np.mean(lse - logits[np.arange(len(labels)), labels]))


def base_refs(net: Network, tokens) -> list[dict]:
    """Frozen choices, logits and dictionaries at the current parameters."""
    rec = []
    dense_loss(net, tokens, np.zeros(len(tokens), dtype=int), "hard", record=rec)
    return rec


def min_logit_margin(net: Network, tokens) -> float:
    gaps = []
    for r in base_refs(net, tokens):
        s = np.sort(r["logits"], axis=-1)
        gaps.append((s[..., -1] - s[..., -2]).min() if s.shape[-1] > 1 else np.inf)
    return float(min(gaps))


# ------------------------------------------------------------------- instance


def gradcheck_instance(seed=0, depth=2, d_model=8, heads=2, k=2, length=6, batch=2, vocab=3, classes=2,
                       mode="complex", min_margin=1e-3):
    """Small f64 network with parameters in [-0.5, 0.5] and well-separated logits."""
    cfg = NetworkConfig(depth=depth, d_model=d_model, heads=heads, k=k, mode=mode, vocab=vocab, classes=classes,
                        precision="f64")
    for attempt in range(1000):
        rng = Rng(seed, (attempt,))
        net = Network.init(cfg, seed)
        for arr in net.parameters().values():
            arr[...] = rng.uniform(-0.5, 0.5, arr.shape)
        net.mark_updated()
        tokens = rng.integers(0, vocab, (batch, length))
        labels = rng.integers(0, classes, batch)
        if min_logit_margin(net, tokens) > min_margin:
            return net, tokens, labels
    raise RuntimeError("no instance with separated logits found")


# --------------------------------------------------------------------- checks


@dataclass
class GradEntry:
    name: str
    kind: str  # "exact" or "surrogate"
    oracle: str  # "hard", "st" or "soft"
    temp: float | None
    error: float

    @property
    def passed(self) -> bool:
        return self.oracle == "soft" or self.error < TOL


@dataclass
class GradReport:
    entries: list[GradEntry] = field(default_factory=list)
    soft_trend: dict[float, float] = field(default_factory=dict)

    @property
    def trend_ok(self) -> bool:
        errs = [self.soft_trend[t] for t in sorted(self.soft_trend, reverse=True)]
        return all(b <= a for a, b in zip(errs, errs[1:]))

    @property
    def ok(self) -> bool:
        return all(e.passed for e in self.entries) and self.trend_ok

    def lines(self) -> list[str]:
        out = []
        for e in self.entries:
            t = "" if e.temp is None else f" temp={e.temp:g}"
            status = "info" if e.oracle == "soft" else ("PASS" if e.passed else "FAIL")
            out.append(f"{status} {e.kind:9s} {e.name:22s} vs {e.oracle}{t}: rel err {e.error:.3e}")
        trend = ", ".join(f"{t:g}: {v:.3e}" for t, v in sorted(self.soft_trend.items(), reverse=True))
        out.append(f"{'PASS' if self.trend_ok else 'FAIL'} surrogate error vs softened model non-increasing ({trend})")
        return out


def param_kind(name: str) -> str:
    return name.split(".")[-1]


def _fd(net: Network, name: str, loss_fn, h: float) -> np.ndarray:
    arr = net.parameters()[name]
    return finite_diff_grad(lambda _: loss_fn(), arr, h)


def check_gradients(net: Network, tokens, labels, temps=DEFAULT_TEMPS, h=1e-6, break_grad: str | None = None,
                    exact=True) -> GradReport:
    """Analytic gradients against finite differences of the dense reference.

    Exact groups use the hard reference with the selector input path disabled;
    surrogate groups use the straight-through reference (must agree) and the
    fully softened reference (error recorded, expected to shrink with temp).
    ``break_grad`` perturbs one parameter kind's analytic gradient to show the
    check can fail.
    """
    report = GradReport()
    surrogate = set(net.surrogate_names())
    names = list(net.parameters())

    def corrupt(g):
        if break_grad is None:
            return g
        if break_grad not in {param_kind(n) for n in names}:
            raise ValueError(f"unknown gradient group {break_grad!r}")
        return {n: (v * 1.1 + 1e-3 if param_kind(n) == break_grad else v) for n, v in g.items()}

    if exact:
        _, g = net.loss_and_grads(tokens, labels, temps[0], st_input=False)
        g = corrupt(g)
        for name in names:
            if name in surrogate:
                continue
            fd = _fd(net, name, lambda: dense_loss(net, tokens, labels, "hard"), h)
            report.entries.append(GradEntry(name, "exact", "hard", None, rel_error(g[name], fd)))

    refs = base_refs(net, tokens)
    for temp in temps:
        _, g = net.loss_and_grads(tokens, labels, temp, st_input=True)
        g = corrupt(g)
        num = den = 0.0
        for name in names:
            if name not in surrogate:
                continue
            fd_st = _fd(net, name, lambda: dense_loss(net, tokens, labels, "st", temp, refs), h)
            report.entries.append(GradEntry(name, "surrogate", "st", temp, rel_error(g[name], fd_st)))
            fd_soft = _fd(net, name, lambda: dense_loss(net, tokens, labels, "soft", temp), h)
            err = rel_error(g[name], fd_soft)
            report.entries.append(GradEntry(name, "surrogate", "soft", temp, err))
            num += float(np.sum((g[name] - fd_soft) ** 2))
            den += float(max(np.sum(g[name] ** 2), np.sum(fd_soft ** 2)))
        report.soft_trend[temp] = float(np.sqrt(num / max(den, 1e-300)))
    return report
