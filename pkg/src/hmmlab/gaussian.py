"""Linear-Gaussian state space models.

    X_{k+1} = A X_k + R U_k,    Y_k = B X_k + S V_k,

with (U_k, V_k) standard Gaussian.  Reference measures are Lebesgue on R^d
and R^p.  The improper likelihood p^lambda is available in closed form once
the window covers the observability horizon (r >= d).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg

from . import _kernels
from .core import AssumptionReport, Init, ModelSpec, ParameterBox, continuity_probe
from .errors import HorizonTooShort, ModelError, UnobservableParameter

_LOG_2PI = math.log(2.0 * math.pi)
RANK_RTOL = 1e-8


def numerical_rank(mat: np.ndarray, rtol: float = RANK_RTOL) -> int:
    s = np.linalg.svd(np.atleast_2d(mat), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


@dataclass(frozen=True)
class LinearGaussianModel:
    """``matrices(theta)`` returns ``(A, R, B, S)``."""

    matrices: Callable[[np.ndarray], tuple]
    family = "linear-gaussian"

    @classmethod
    def constant(cls, A, R, B, S) -> "LinearGaussianModel":
        mats = tuple(np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, R, B, S))
        return cls(lambda theta: mats)

    def mats(self, theta):
        A, R, B, S = (np.atleast_2d(np.asarray(m, dtype=float)) for m in self.matrices(theta))
        d, q, p = A.shape[0], R.shape[1], B.shape[0]
        if A.shape != (d, d) or R.shape != (d, q) or B.shape != (p, d) or S.shape != (p, p):
            raise ModelError("inconsistent state space dimensions")
        return A, R, B, S

    def dims(self, theta) -> tuple[int, int, int]:
        A, R, B, _ = self.mats(theta)
        return A.shape[0], R.shape[1], B.shape[0]

    def stationary_cov(self, theta) -> np.ndarray:
        A, R, _, _ = self.mats(theta)
        if np.max(np.abs(np.linalg.eigvals(A))) >= 1.0:
            raise ModelError("no stationary law: A is not stable")
        return linalg.solve_discrete_lyapunov(A, R @ R.T)

    def gaussian_init(self, theta, init: Init) -> tuple[np.ndarray, np.ndarray]:
        d = self.dims(theta)[0]
        if init.kind == "stationary":
            return np.zeros(d), self.stationary_cov(theta)
        if init.kind == "point":
            return np.atleast_1d(np.asarray(init.point, dtype=float)).reshape(d), np.zeros((d, d))
        if init.kind == "gaussian":
            return init.mean.reshape(d), init.cov.reshape(d, d)
        raise ModelError(f"init kind {init.kind!r} is not defined for linear-Gaussian models")

    def simulate(self, theta, init: Init, n: int, gen):
        A, R, B, S = self.mats(theta)
        d, q, p = A.shape[0], R.shape[1], B.shape[0]
        mean, cov = self.gaussian_init(theta, init)
        x0 = mean + _psd_sqrt(cov) @ gen.standard_normal(d)
        U = gen.standard_normal((max(n, 1), q))
        V = gen.standard_normal((n + 1, p))
        return _kernels.linear_gaussian_path(A, R, B, S, x0, U, V)

    def log_g(self, theta, x, y) -> float:
        _, _, B, S = self.mats(theta)
        return _gauss_logpdf(np.atleast_1d(y) - B @ np.atleast_1d(x), S @ S.T)

    def log_q(self, theta, x, x2) -> float:
        """d-step transition density (the controllability Gaussian)."""
        A, R, _, _ = self.mats(theta)
        d = A.shape[0]
        C = controllability(A, R, d)
        mean = np.linalg.matrix_power(A, d) @ np.atleast_1d(x)
        return _gauss_logpdf(np.atleast_1d(x2) - mean, C @ C.T)

    def log_q_sup(self, theta) -> float:
        A, R, _, _ = self.mats(theta)
        d = A.shape[0]
        C = controllability(A, R, d)
        sign, logdet = np.linalg.slogdet(C @ C.T)
        if sign <= 0:
            return math.inf
        return -0.5 * d * _LOG_2PI - 0.5 * logdet

    def log_g_sup(self, theta, y) -> float:
        """sup_x log g_theta(x, y): weighted least squares in x."""
        _, _, B, S = self.mats(theta)
        W = np.linalg.inv(S @ S.T)
        y = np.atleast_1d(y)
        x = np.linalg.lstsq(B.T @ W @ B, B.T @ W @ y, rcond=None)[0]
        return _gauss_logpdf(y - B @ x, S @ S.T)


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    return v * np.sqrt(np.clip(w, 0.0, None))


def _gauss_logpdf(resid: np.ndarray, cov: np.ndarray) -> float:
    c = linalg.cho_factor(cov, lower=True)
    z = linalg.cho_solve(c, resid)
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    return float(-0.5 * (resid.size * _LOG_2PI + logdet + resid @ z))


def observability(A, B, r: int) -> np.ndarray:
    blocks, M = [], B
    for _ in range(r):
        blocks.append(M)
        M = M @ A
    return np.vstack(blocks)


def controllability(A, R, r: int) -> np.ndarray:
    blocks, M = [], R
    for _ in range(r):
        blocks.append(M)
        M = A @ M
    return np.hstack(blocks)


@dataclass(frozen=True)
class StructuralMatrices:
    obs: np.ndarray
    ctrl: np.ndarray
    hankel: np.ndarray
    sdiag: np.ndarray
    gamma: np.ndarray
    hmat: np.ndarray | None


def structural(model: LinearGaussianModel, theta, r: int) -> StructuralMatrices:
    """Observability, controllability, block-Toeplitz noise map and the H matrix.

    ``hmat`` is None when the observability matrix is rank deficient.
    """
    if r < 1:
        raise ValueError("r must be at least 1")
    A, R, B, S = model.mats(theta)
    d, q, p = A.shape[0], R.shape[1], B.shape[0]
    obs = observability(A, B, r)
    ctrl = controllability(A, R, r)
    hankel = np.zeros((r * p, (r - 1) * q))
    markov = [B @ np.linalg.matrix_power(A, k) @ R for k in range(max(r - 1, 0))]
    for i in range(1, r):
        for j in range(i):
            hankel[i * p:(i + 1) * p, j * q:(j + 1) * q] = markov[i - 1 - j]
    sdiag = np.kron(np.eye(r), S)
    gamma = hankel @ hankel.T + sdiag @ sdiag.T
    hmat = None
    if numerical_rank(obs) == d:
        # H = G^{-T} (1 - P) G^{-1} with G the Cholesky factor of gamma and P the
        # projection onto range(G^{-1} obs); written through the orthogonal
        # complement so H is PSD of rank rp - d by construction
        chol = np.linalg.cholesky(0.5 * (gamma + gamma.T))
        white = linalg.solve_triangular(chol, obs, lower=True)
        q_full, _ = np.linalg.qr(white, mode="complete")
        comp = linalg.solve_triangular(chol.T, q_full[:, d:], lower=False)
        hmat = comp @ comp.T
    return StructuralMatrices(obs, ctrl, hankel, sdiag, 0.5 * (gamma + gamma.T), hmat)


def check_assumptions_L(model: LinearGaussianModel, theta, box: ParameterBox | None = None,
                        rng=0) -> AssumptionReport:
    A, R, B, S = model.mats(theta)
    d = A.shape[0]
    report = AssumptionReport()
    ro, rc = numerical_rank(observability(A, B, d)), numerical_rank(controllability(A, R, d))
    report.add("L1-observable", "pass" if ro == d else "fail", ro, "rank of observability matrix")
    report.add("L1-controllable", "pass" if rc == d else "fail", rc, "rank of controllability matrix")
    radius = float(np.max(np.abs(np.linalg.eigvals(A))))
    report.add("L2", "pass" if radius < 1.0 else "fail", radius, "spectral radius of A")
    rs = numerical_rank(S)
    report.add("L3", "pass" if rs == S.shape[0] else "fail", rs, "rank of S")
    if box is None:
        report.add("L4", "indeterminate", detail="no parameter box supplied")
    else:
        status, worst = continuity_probe(
            lambda t: np.concatenate([m.ravel() for m in model.mats(t)]), box, rng)
        report.add("L4", status, worst, "finite-difference probe of theta -> (A, R, B, S)")
    return report


# -- likelihoods -------------------------------------------------------------

def _check_psd(cov: np.ndarray):
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if not np.allclose(cov, cov.T, atol=1e-12 * (1 + np.abs(cov).max())):
        raise ModelError("initial covariance must be symmetric")
    w = np.linalg.eigvalsh(cov)
    if w.size and w.min() < -1e-10 * max(1.0, abs(w.max())):
        raise ModelError("initial covariance must be positive semidefinite")
    return 0.5 * (cov + cov.T)


def _obs_matrix(y, p: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    y = y.reshape(-1, 1) if y.ndim == 1 and p == 1 else np.atleast_2d(y)
    if y.shape[1] != p:
        raise ModelError(f"observations have dimension {y.shape[1]}, model expects {p}")
    return np.ascontiguousarray(y)


def kalman_cumulative(model: LinearGaussianModel, theta, mean, cov, y) -> np.ndarray:
    A, R, B, S = model.mats(theta)
    cov = _check_psd(cov)
    Y = _obs_matrix(y, B.shape[0])
    return _kernels.kalman_cumulative(A, R @ R.T, B, S @ S.T,
                                      np.asarray(mean, dtype=float).ravel().copy(), cov, Y)


def kalman_loglik(model: LinearGaussianModel, theta, mean, cov, y) -> float:
    """Exact log p^nu(y_0^n) for nu = N(mean, cov)."""
    return float(kalman_cumulative(model, theta, mean, cov, y)[-1])


def stacked_moments(model: LinearGaussianModel, theta, cov0, n: int):
    """Return (M, C) with stacked Y_0^n ~ N(M x0_mean, C) when X_0 ~ N(x0_mean, cov0)."""
    A, R, B, S = model.mats(theta)
    d, p = A.shape[0], B.shape[0]
    cov0 = np.atleast_2d(np.asarray(cov0, dtype=float))
    powers = [np.eye(d)]
    for _ in range(n):
        powers.append(A @ powers[-1])
    M = np.vstack([B @ Ak for Ak in powers])
    state_cov = [cov0]
    for _ in range(n):
        state_cov.append(A @ state_cov[-1] @ A.T + R @ R.T)
    C = np.zeros(((n + 1) * p, (n + 1) * p))
    SS = S @ S.T
    for k in range(n + 1):
        for j in range(k + 1):
            block = B @ powers[k - j] @ state_cov[j] @ B.T
            if k == j:
                block = block + SS
            C[k * p:(k + 1) * p, j * p:(j + 1) * p] = block
            C[j * p:(j + 1) * p, k * p:(k + 1) * p] = block.T
    return M, 0.5 * (C + C.T)


def stacked_logpdf(M, C, means, y) -> np.ndarray:
    """Log N(y; M m, C) for each row m of ``means``."""
    c = linalg.cho_factor(C, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    resid = y.ravel()[None, :] - np.atleast_2d(means) @ M.T
    z = linalg.cho_solve(c, resid.T)
    quad = np.einsum("ij,ji->i", resid, z)
    return -0.5 * (y.size * _LOG_2PI + logdet + quad)


def joint_density_oracle(model: LinearGaussianModel, theta, mean, cov, y) -> float:
    """Brute-force log-likelihood from the stacked observation Gaussian."""
    _, _, B, _ = model.mats(theta)
    Y = _obs_matrix(y, B.shape[0])
    M, C = stacked_moments(model, theta, _check_psd(cov), Y.shape[0] - 1)
    return float(stacked_logpdf(M, C, np.asarray(mean, dtype=float).ravel(), Y)[0])


def improper_loglik(model: LinearGaussianModel, theta, y) -> float:
    """log p^lambda(y_0^{r-1}) with lambda Lebesgue, closed form for r >= d."""
    A, _, B, _ = model.mats(theta)
    d, p = A.shape[0], B.shape[0]
    Y = _obs_matrix(y, p)
    r = Y.shape[0]
    if r < d:
        raise HorizonTooShort(f"window of {r} observations is shorter than d = {d}")
    sm = structural(model, theta, r)
    if sm.hmat is None:
        raise UnobservableParameter("observability matrix is rank deficient")
    yv = Y.ravel()
    info = sm.obs.T @ np.linalg.solve(sm.gamma, sm.obs)
    _, logdet_info = np.linalg.slogdet(info)
    _, logdet_gamma = np.linalg.slogdet(sm.gamma)
    return float(0.5 * (d - p * r) * _LOG_2PI - 0.5 * logdet_info - 0.5 * logdet_gamma
                 - 0.5 * yv @ sm.hmat @ yv)


def flat_prior_state(model: LinearGaussianModel, theta, y):
    """Gaussian law of X_r given y_0^{r-1} when X_0 has the Lebesgue (flat) prior.

    The posterior of (X_0, U_0..U_{r-1}) is Gaussian because the observability
    matrix has full rank; X_r is a linear function of that vector.
    """
    A, R, B, S = model.mats(theta)
    d, q, p = A.shape[0], R.shape[1], B.shape[0]
    Y = _obs_matrix(y, p)
    r = Y.shape[0]
    sm = structural(model, theta, r)
    if sm.hmat is None:
        raise UnobservableParameter("observability matrix is rank deficient")
    L = np.hstack([sm.obs, sm.hankel, np.zeros((r * p, q))])
    noise = sm.sdiag @ sm.sdiag.T
    prior_prec = np.zeros((d + r * q, d + r * q))
    prior_prec[d:, d:] = np.eye(r * q)
    prec = prior_prec + L.T @ np.linalg.solve(noise, L)
    cov_z = np.linalg.inv(0.5 * (prec + prec.T))
    mean_z = cov_z @ (L.T @ np.linalg.solve(noise, Y.ravel()))
    T = np.hstack([np.linalg.matrix_power(A, r)]
                  + [np.linalg.matrix_power(A, r - 1 - k) @ R for k in range(r)])
    cov = T @ cov_z @ T.T
    return T @ mean_z, 0.5 * (cov + cov.T)


def improper_forward_cumulative(model: LinearGaussianModel, theta, y) -> np.ndarray:
    """log p^lambda(y_0^k) for k = d-1..n (entries before d-1 are +inf)."""
    A, _, B, _ = model.mats(theta)
    d = A.shape[0]
    Y = _obs_matrix(y, B.shape[0])
    if Y.shape[0] < d:
        raise HorizonTooShort(f"need at least d = {d} observations")
    out = np.full(Y.shape[0], np.inf)
    head = improper_loglik(model, theta, Y[:d])
    out[d - 1] = head
    if Y.shape[0] > d:
        mean, cov = flat_prior_state(model, theta, Y[:d])
        out[d:] = head + kalman_cumulative(model, theta, mean, cov, Y[d:])
    return out


def improper_forward_loglik(model: LinearGaussianModel, theta, y) -> float:
    """log p^lambda(y_0^n) for any n >= d - 1."""
    return float(improper_forward_cumulative(model, theta, y)[-1])


# -- builders ----------------------------------------------------------------

def scalar_gaussian(a_star: float = 0.5, r: float = 1.0, b: float = 1.0, s: float = 1.0,
                    lower: float = -0.9, upper: float = 0.9) -> ModelSpec:
    """Scalar AR(1) observed in noise; theta = (a,)."""
    payload = LinearGaussianModel(lambda theta: (np.array([[theta[0]]]), np.array([[r]]),
                                                 np.array([[b]]), np.array([[s]])))
    return ModelSpec("linear-gaussian", payload, ParameterBox([lower], [upper]),
                     np.array([a_star]), name="scalar_gaussian")


def scaled_linear_gaussian(A, R, B, S, theta_star: float = 1.0, lower: float = 0.5,
                           upper: float = 1.2) -> ModelSpec:
    """Fixed (A, R, B, S) with A scaled by the scalar parameter: A_theta = theta * A."""
    A, R, B, S = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, R, B, S))
    payload = LinearGaussianModel(lambda theta: (theta[0] * A, R, B, S))
    return ModelSpec("linear-gaussian", payload, ParameterBox([lower], [upper]),
                     np.array([theta_star]), name="linear_gaussian")
