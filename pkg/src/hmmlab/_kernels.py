"""Compiled inner loops.

Everything here is a plain-array numba kernel with a fixed summation order
(state index ascending) so results do not depend on platform or threading.
Random draws are made by the caller with numpy and passed in as uniforms.
"""
import numpy as np
from numba import njit

NEG_INF = -np.inf


@njit(cache=True, nogil=True)
def _logsumexp(v):
    m = NEG_INF
    for i in range(v.size):
        if v[i] > m:
            m = v[i]
    if m == NEG_INF:
        return NEG_INF
    s = 0.0
    for i in range(v.size):
        s += np.exp(v[i] - m)
    return m + np.log(s)


@njit(cache=True, nogil=True)
def forward_cumulative(log_init, log_trans, log_emit):
    """Cumulative log p(y_0^k) for k = 0..n; -inf once the path is impossible."""
    n1, d = log_emit.shape
    out = np.empty(n1)
    alpha = log_init + log_emit[0]
    c = _logsumexp(alpha)
    out[0] = c
    if c == NEG_INF:
        out[:] = NEG_INF
        return out
    alpha = alpha - c
    total = c
    new = np.empty(d)
    col = np.empty(d)
    for k in range(1, n1):
        for j in range(d):
            for i in range(d):
                col[i] = alpha[i] + log_trans[i, j]
            new[j] = _logsumexp(col) + log_emit[k, j]
        c = _logsumexp(new)
        if c == NEG_INF:
            out[k:] = NEG_INF
            return out
        total += c
        out[k] = total
        for j in range(d):
            alpha[j] = new[j] - c
    return out


@njit(cache=True, nogil=True)
def _categorical(cum_row, u):
    k = 0
    last = cum_row.size - 1
    while k < last and u >= cum_row[k]:
        k += 1
    return k


@njit(cache=True, nogil=True)
def simulate_chain(cum_trans, x0, uniforms):
    """States (R, n+1) from start states x0 (R,) and uniforms (R, n)."""
    reps, n = uniforms.shape
    out = np.empty((reps, n + 1), dtype=np.int64)
    for r in range(reps):
        x = x0[r]
        out[r, 0] = x
        for k in range(n):
            x = _categorical(cum_trans[x], uniforms[r, k])
            out[r, k + 1] = x
    return out


@njit(cache=True, nogil=True)
def chain_sums(cum_trans, x0, uniforms, fvals):
    """Sum_{i=1..n} f(X_i) per replicate without storing paths."""
    reps, n = uniforms.shape
    out = np.empty(reps)
    for r in range(reps):
        x = x0[r]
        s = 0.0
        for k in range(n):
            x = _categorical(cum_trans[x], uniforms[r, k])
            s += fvals[x]
        out[r] = s
    return out


@njit(cache=True, nogil=True)
def split_chain(cum_trans, cum_nu, cum_resid, bridge_cum, in_small, m, x0,
                u_step, u_bell, u_draw, eps):
    """Split-chain simulation for a finite chain with an m-step minorization.

    ``cum_resid[x]`` is the cumulative residual kernel row, ``bridge_cum[j, x, z, :]``
    the cumulative law of the next state given current state x, target z and
    j steps remaining to the target.  Returns states, bell flags (-1 where no
    bell was rung) and a 0/1 mask of regeneration times.
    """
    n = u_step.size
    states = np.empty(n + 1, dtype=np.int64)
    bells = -np.ones(n + 1, dtype=np.int64)
    regen = np.zeros(n + 1, dtype=np.int64)
    states[0] = x0
    k = 0
    while k < n:
        x = states[k]
        if in_small[x] and k + m <= n:
            bell = 1 if u_bell[k] < eps else 0
            bells[k] = bell
            if bell == 1:
                z = _categorical(cum_nu, u_draw[k])
            else:
                z = _categorical(cum_resid[x], u_draw[k])
            cur = x
            for j in range(1, m):
                cur = _categorical(bridge_cum[m - j, cur, z], u_step[k + j - 1])
                states[k + j] = cur
            states[k + m] = z
            if bell == 1:
                regen[k + m] = 1
            k += m
        else:
            states[k + 1] = _categorical(cum_trans[x], u_step[k])
            k += 1
    return states, bells, regen


@njit(cache=True, nogil=True)
def kalman_cumulative(A, RRt, B, SSt, m0, P0, Y):
    """Cumulative Gaussian log-likelihood by predict/update with Joseph form."""
    n1, p = Y.shape
    d = m0.size
    out = np.empty(n1)
    m = m0.copy()
    P = P0.copy()
    eye = np.eye(d)
    total = 0.0
    log2pi = np.log(2.0 * np.pi)
    for k in range(n1):
        if k > 0:
            m = A @ m
            P = A @ P @ A.T + RRt
        v = Y[k] - B @ m
        F = B @ P @ B.T + SSt
        F = 0.5 * (F + F.T)
        L = np.linalg.cholesky(F)
        logdet = 0.0
        for i in range(p):
            logdet += 2.0 * np.log(L[i, i])
        Finv = np.linalg.inv(F)
        w = Finv @ v
        total += -0.5 * (p * log2pi + logdet + v @ w)
        out[k] = total
        K = P @ B.T @ Finv
        m = m + K @ v
        IKB = eye - K @ B
        P = IKB @ P @ IKB.T + K @ SSt @ K.T
        P = 0.5 * (P + P.T)
    return out


@njit(cache=True, nogil=True)
def linear_gaussian_path(A, R, B, S, x0, U, V):
    n1 = V.shape[0]
    d = x0.size
    p = B.shape[0]
    X = np.empty((n1, d))
    Y = np.empty((n1, p))
    x = x0.copy()
    for k in range(n1):
        if k > 0:
            x = A @ x + R @ U[k - 1]
        X[k] = x
        Y[k] = B @ x + S @ V[k]
    return X, Y
