# Numba kernels behind scan.py. All take flattened (R, L, N) sequences and an
# explicit list of work items so a thread pool can split the work; each kernel
# releases the GIL. Results never depend on how items are split.
import numba as nb
import numpy as np

_jit = nb.njit(nogil=True, cache=True)


@_jit
def _scatter_step(P, D, x, b, out):
    # out = (A x) + b, scatter accumulated in ascending column order
    n = P.shape[0]
    for i in range(n):
        out[i] = 0
    for j in range(n):
        out[P[j]] += D[j] * x[j]
    for i in range(n):
        out[i] = out[i] + b[i]


@_jit
def phase_a(idx, diag, b, rows, chunks, tau, pi_out, d_out, bias_out):
    """Fold each (row, chunk) item into its aggregate (pi, d, bias)."""
    L = idx.shape[1]
    n = idx.shape[2]
    tmp = np.empty(n, dtype=bias_out.dtype)
    for it in range(rows.shape[0]):
        r = rows[it]
        c = chunks[it]
        t0 = c * tau
        t1 = min(L, t0 + tau)
        pi = pi_out[r, c]
        d = d_out[r, c]
        bias = bias_out[r, c]
        for i in range(n):
            pi[i] = i
            d[i] = 1
            bias[i] = 0
        for t in range(t0, t1):
            P = idx[r, t]
            D = diag[r, t]
            for i in range(n):
                q = pi[i]
                pi[i] = P[q]
                d[i] = D[q] * d[i]
            _scatter_step(P, D, bias, b[r, t], tmp)
            for i in range(n):
                bias[i] = tmp[i]


@_jit
def phase_b(pi, d, bias, x0, carry):
    """Exclusive prefix over chunks, sequential per row: carry[r, 0] = x0[r]."""
    R = pi.shape[0]
    C = pi.shape[1]
    for r in range(R):
        for i in range(x0.shape[1]):
            carry[r, 0, i] = x0[r, i]
        for c in range(1, C):
            _scatter_step(pi[r, c - 1], d[r, c - 1], carry[r, c - 1], bias[r, c - 1], carry[r, c])


@_jit
def phase_c_replay(idx, diag, b, carry, rows, chunks, tau, out):
    """Re-run each chunk's recurrence from its carry, writing final states."""
    L = idx.shape[1]
    n = idx.shape[2]
    x = np.empty(n, dtype=out.dtype)
    for it in range(rows.shape[0]):
        r = rows[it]
        c = chunks[it]
        t0 = c * tau
        t1 = min(L, t0 + tau)
        for i in range(n):
            x[i] = carry[r, c, i]
        for t in range(t0, t1):
            _scatter_step(idx[r, t], diag[r, t], x, b[r, t], out[r, t])
            for i in range(n):
                x[i] = out[r, t, i]


@_jit
def phase_c_literal(idx, diag, b, carry, rows, chunks, tau, out):
    """Literal correction: local state from zero plus the prefix operator applied to the carry."""
    L = idx.shape[1]
    n = idx.shape[2]
    x = np.zeros(n, dtype=out.dtype)
    tmp = np.zeros(n, dtype=out.dtype)
    corr = np.zeros(n, dtype=out.dtype)
    zero = np.zeros(n, dtype=out.dtype)
    pi = np.empty(n, dtype=np.int64)
    d = np.empty(n, dtype=diag.dtype)
    for it in range(rows.shape[0]):
        r = rows[it]
        c = chunks[it]
        t0 = c * tau
        t1 = min(L, t0 + tau)
        for i in range(n):
            x[i] = 0
            pi[i] = i
            d[i] = 1
        for t in range(t0, t1):
            P = idx[r, t]
            D = diag[r, t]
            _scatter_step(P, D, x, b[r, t], tmp)
            for i in range(n):
                x[i] = tmp[i]
                q = pi[i]
                pi[i] = P[q]
                d[i] = D[q] * d[i]
            _scatter_step(pi, d, carry[r, c], zero, corr)
            for i in range(n):
                out[r, t, i] = x[i] + corr[i]


@_jit
def backward(idx, diag, states, x0, gx, rows, _unused, lam_out, ddiag_out, dx0_out):
    """Adjoint recurrence lam_{t-1} = A_t^H lam_t + gx_{t-1}, per row item."""
    L = idx.shape[1]
    n = idx.shape[2]
    lam = np.empty(n, dtype=lam_out.dtype)
    nxt = np.empty(n, dtype=lam_out.dtype)
    for it in range(rows.shape[0]):
        r = rows[it]
        for i in range(n):
            lam[i] = gx[r, L - 1, i]
        for t in range(L - 1, -1, -1):
            P = idx[r, t]
            D = diag[r, t]
            for i in range(n):
                lam_out[r, t, i] = lam[i]
            for j in range(n):
                if t > 0:
                    xp = states[r, t - 1, j]
                else:
                    xp = x0[r, j]
                g = lam[P[j]]
                ddiag_out[r, t, j] = g * np.conj(xp)
                nxt[j] = np.conj(D[j]) * g
            if t > 0:
                for j in range(n):
                    lam[j] = nxt[j] + gx[r, t - 1, j]
            else:
                for j in range(n):
                    dx0_out[r, j] = nxt[j]
