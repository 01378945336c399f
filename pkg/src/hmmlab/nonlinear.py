"""Vector-ARCH hidden chains X_k = G(X_{k-1}) + Sigma(X_{k-1}) zeta_k.

The drift is split as G(x) = A(x) x + h(x).  All model callables are
vectorized over a leading batch axis: states come in as ``(m, d)`` arrays.
Likelihoods for scalar chains (d = 1) are evaluated by deterministic grid
quadrature of the forward recursion.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special
from scipy.signal import lfilter

from .core import AssumptionReport, Init, ModelSpec, ParameterBox, continuity_probe, integrability_proxy
from .errors import BudgetExceeded, GridTooSmall, IdentityUndefined, ModelError
from .rng import as_generator

_LOG_2PI = math.log(2.0 * math.pi)
LEAK_TOL = 1e-6
ACTIVE_MASS = 1e-10


def _std_normal_logpdf(z):
    z = np.atleast_2d(z)
    return -0.5 * np.sum(z * z, axis=1) - 0.5 * z.shape[1] * _LOG_2PI


def _std_normal_sample(gen, size, d):
    return gen.standard_normal((size, d))


def _std_normal_cdf(z):
    return special.ndtr(z)


@dataclass(frozen=True)
class ArchModel:
    dim: int
    obs_dim: int
    drift_matrix: Callable
    drift_offset: Callable
    diffusion: Callable
    emission_logpdf: Callable
    emission_sample: Callable
    noise_logpdf: Callable = _std_normal_logpdf
    noise_sample: Callable = _std_normal_sample
    noise_cdf: Callable | None = _std_normal_cdf
    # (phi, sigma) of an AR(1) core when the drift is linear and the diffusion
    # constant; enables exact vectorized simulation
    linear_core: Callable | None = None
    family = "nonlinear-arch"

    def drift(self, theta, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.einsum("mij,mj->mi", self.drift_matrix(theta, X), X) + self.drift_offset(theta, X)

    def _path(self, theta, x0, n, gen) -> np.ndarray:
        d = self.dim
        if self.linear_core is not None:
            phi, sigma = self.linear_core(theta)
            z = self.noise_sample(gen, n, 1)[:, 0]
            drive = np.concatenate([[x0[0]], sigma * z])
            return lfilter([1.0], [1.0, -phi], drive).reshape(-1, 1)
        X = np.empty((n + 1, d))
        X[0] = x0
        Z = self.noise_sample(gen, n, d)
        for k in range(n):
            xk = X[k:k + 1]
            X[k + 1] = self.drift(theta, xk)[0] + self.diffusion(theta, xk)[0] @ Z[k]
        return X

    def _start(self, theta, init: Init, gen) -> np.ndarray:
        d = self.dim
        if init.kind == "point":
            return np.atleast_1d(np.asarray(init.point, dtype=float)).reshape(d)
        if init.kind == "gaussian":
            return init.mean + np.linalg.cholesky(init.cov + 1e-300 * np.eye(d)) @ gen.standard_normal(d)
        if init.kind == "stationary":
            if init.burn_in <= 0:
                raise ModelError("stationary law is not available in closed form; enable burn-in")
            return self._path(theta, np.zeros(d), init.burn_in, gen)[-1]
        raise ModelError(f"init kind {init.kind!r} is not defined for ARCH models")

    def simulate(self, theta, init: Init, n: int, gen):
        X = self._path(theta, self._start(theta, init, gen), n, gen)
        Y = self.emission_sample(theta, X, gen)
        return (X[:, 0] if self.dim == 1 else X), (Y[:, 0] if self.obs_dim == 1 else Y)

    def log_g(self, theta, x, y) -> float:
        X = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, self.dim)
        return float(self.emission_logpdf(theta, X, np.atleast_1d(y))[0])

    def log_q(self, theta, x, x2) -> float:
        X = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, self.dim)
        X2 = np.atleast_1d(np.asarray(x2, dtype=float)).reshape(1, self.dim)
        return float(self.log_q_batch(theta, X, X2)[0])

    def log_q_batch(self, theta, X, X2) -> np.ndarray:
        """log q(x_i, x2_i) = log rho(Sigma^{-1}(x2 - G(x))) - log|det Sigma(x)|."""
        sig = self.diffusion(theta, X)
        resid = X2 - self.drift(theta, X)
        z = np.linalg.solve(sig, resid[..., None])[..., 0]
        _, logdet = np.linalg.slogdet(sig)
        return self.noise_logpdf(z) - logdet

    def q_sup(self, theta, X, noise_sup: float) -> float:
        """sup over the supplied states of |det Sigma(x)|^{-1} |rho|_inf."""
        _, logdet = np.linalg.slogdet(self.diffusion(theta, np.atleast_2d(X)))
        return float(np.exp(-logdet.min()) * noise_sup)


# -- stochastic volatility -------------------------------------------------------

def sv_log_g(beta, x, y):
    """log g(x, y) = -log(2 pi beta^2)/2 - exp(-x) y^2 / (2 beta^2) - x/2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return -0.5 * np.log(2.0 * np.pi * beta * beta) - np.exp(-x) * y * y / (2.0 * beta * beta) - 0.5 * x


def sv_identities(y, beta: float = 1.0) -> tuple[float, float]:
    """Closed forms (sup_x g(x, y), integral of g(x, y) dx); neither depends on beta."""
    if y == 0:
        raise IdentityUndefined("identities require y != 0")
    ay = abs(float(y))
    return 1.0 / (math.sqrt(2.0 * math.pi * math.e) * ay), 1.0 / ay


@dataclass(frozen=True)
class StochVolModel:
    """X_{k+1} = phi X_k + sigma zeta_k,  Y_k = beta exp(X_k / 2) eps_k."""

    phi: Callable[[np.ndarray], float]
    sigma: Callable[[np.ndarray], float]
    beta: Callable[[np.ndarray], float]

    def arch(self) -> ArchModel:
        def emission_logpdf(theta, X, y):
            return sv_log_g(self.beta(theta), X[:, 0], y[0])

        def emission_sample(theta, X, gen):
            return (self.beta(theta) * np.exp(X[:, 0] / 2.0) * gen.standard_normal(X.shape[0]))[:, None]

        return ArchModel(
            dim=1, obs_dim=1,
            drift_matrix=lambda theta, X: np.full((X.shape[0], 1, 1), self.phi(theta)),
            drift_offset=lambda theta, X: np.zeros_like(X),
            diffusion=lambda theta, X: np.full((X.shape[0], 1, 1), self.sigma(theta)),
            emission_logpdf=emission_logpdf,
            emission_sample=emission_sample,
            linear_core=lambda theta: (self.phi(theta), self.sigma(theta)),
        )


def stochastic_volatility(theta_star=(0.9, 0.3, 1.0), lower=(0.5, 0.1, 0.5),
                          upper=(0.98, 0.6, 1.5)) -> ModelSpec:
    """theta = (phi, sigma, beta)."""
    sv = StochVolModel(lambda t: float(t[0]), lambda t: float(t[1]), lambda t: float(t[2]))
    return ModelSpec("nonlinear-arch", sv.arch(), ParameterBox(lower, upper),
                     np.array(theta_star, dtype=float), name="stochvol")


def linear_gaussian_arch(a: float, r: float, b: float, s: float) -> ArchModel:
    """Scalar linear-Gaussian model written as an ARCH chain (theta unused)."""

    def emission_logpdf(theta, X, y):
        z = (y[0] - b * X[:, 0]) / s
        return -0.5 * z * z - math.log(s) - 0.5 * _LOG_2PI

    return ArchModel(
        dim=1, obs_dim=1,
        drift_matrix=lambda theta, X: np.full((X.shape[0], 1, 1), a),
        drift_offset=lambda theta, X: np.zeros_like(X),
        diffusion=lambda theta, X: np.full((X.shape[0], 1, 1), r),
        emission_logpdf=emission_logpdf,
        emission_sample=lambda theta, X, gen: b * X + s * gen.standard_normal(X.shape),
        linear_core=lambda theta: (a, r),
    )


# -- grid quadrature ---------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    lo: float
    hi: float
    m: int

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.m)

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / (self.m - 1)


def transition_table(model: ArchModel, theta, grid: Grid):
    """Row i holds q(x_i, x_j) dx; returns (table, mass leaving the grid per row)."""
    if model.dim != 1:
        raise ModelError("grid quadrature is implemented for scalar states only")
    x = grid.nodes.reshape(-1, 1)
    m = grid.m
    rows = np.repeat(x, m, axis=0)
    cols = np.tile(x, (m, 1))
    logk = model.log_q_batch(theta, rows, cols).reshape(m, m) + math.log(grid.step)
    table = np.exp(logk)
    row_sum = table.sum(axis=1)
    if model.noise_cdf is not None:
        mean = model.drift(theta, x)[:, 0]
        scale = np.abs(model.diffusion(theta, x)[:, 0, 0])
        inside = model.noise_cdf((grid.hi - mean) / scale) - model.noise_cdf((grid.lo - mean) / scale)
        with np.errstate(invalid="ignore", divide="ignore"):
            fix = np.where(row_sum > 0, inside / row_sum, 0.0)
        table *= fix[:, None]
        leak = 1.0 - inside
    else:
        leak = np.clip(1.0 - row_sum, 0.0, None)
    return table, leak


def grid_init_weights(model: ArchModel, theta, init: Init, grid: Grid, table=None) -> np.ndarray:
    x = grid.nodes
    if init.kind == "point":
        w = np.zeros(grid.m)
        w[int(np.argmin(np.abs(x - float(np.ravel(init.point)[0]))))] = 1.0
        return w
    if init.kind == "gaussian":
        mean, var = float(init.mean[0]), float(init.cov[0, 0])
        w = np.exp(-0.5 * (x - mean) ** 2 / var)
        return w / w.sum()
    if init.kind == "weights":
        w = np.asarray(init.weights, dtype=float)
        if w.shape != (grid.m,):
            raise ModelError("grid weights have the wrong length")
        return w
    if init.kind == "stationary":
        if table is None:
            table, _ = transition_table(model, theta, grid)
        w = np.full(grid.m, 1.0 / grid.m)
        for _ in range(10_000):
            nxt = w @ table
            nxt /= nxt.sum()
            if np.abs(nxt - w).sum() < 1e-13:
                break
            w = nxt
        return nxt
    raise ModelError(f"init kind {init.kind!r} is not defined for grid quadrature")


def quadrature_cumulative(model: ArchModel, theta, init: Init, grid: Grid, y) -> np.ndarray:
    """Cumulative log p^nu(y_0^k) by forward recursion on a state grid."""
    table, leak = transition_table(model, theta, grid)
    w = grid_init_weights(model, theta, init, grid, table)
    Y = np.asarray(y, dtype=float).reshape(len(y), -1)
    X = grid.nodes.reshape(-1, 1)
    out = np.empty(len(Y))
    active = w > ACTIVE_MASS * w.max()
    total = 0.0
    alpha = w
    for k in range(len(Y)):
        if k > 0:
            alpha = alpha @ table
        lg = model.emission_logpdf(theta, X, Y[k])
        top = lg.max()
        alpha = alpha * np.exp(lg - top)
        c = alpha.sum()
        if c <= 0.0:
            out[k:] = -np.inf
            return out
        total += math.log(c) + top
        out[k] = total
        alpha = alpha / c
        active |= alpha > ACTIVE_MASS
    worst = leak[active].max()
    if worst > LEAK_TOL:
        raise GridTooSmall(f"{worst:.2e} of transition mass leaves [{grid.lo}, {grid.hi}]")
    return out


def quadrature_loglik(model: ArchModel, theta, init: Init, grid: Grid, y) -> float:
    return float(quadrature_cumulative(model, theta, init, grid, y)[-1])


# -- joint spectral radius ---------------------------------------------------------

def jsr_bounds(matrices, depth: int, budget: int = 1_000_000) -> list[float]:
    """(max over length-m products of the spectral norm)^(1/m) for m = 1..depth."""
    mats = [np.atleast_2d(np.asarray(a, dtype=float)) for a in matrices]
    if not mats:
        raise ValueError("need at least one matrix")
    k = len(mats)
    if sum(k ** m for m in range(1, depth + 1)) > budget:
        raise BudgetExceeded(f"{k} matrices at depth {depth} exceed {budget} products")
    stack = np.stack(mats)
    level = stack
    out = []
    for m in range(1, depth + 1):
        if m > 1:
            level = np.einsum("aij,bjk->abik", level, stack).reshape(-1, *stack.shape[1:])
        norms = np.linalg.norm(level, ord=2, axis=(1, 2))
        out.append(float(norms.max()) ** (1.0 / m))
    return out


def jsr_upper_bound(matrices, depth: int, budget: int = 1_000_000) -> float:
    """Upper bound on the joint spectral radius (min over depths up to ``depth``)."""
    return min(jsr_bounds(matrices, depth, budget))


# -- assumption checks -------------------------------------------------------------

def _unique_matrices(mats: np.ndarray, limit: int) -> list[np.ndarray]:
    out = []
    for a in mats:
        if not any(np.allclose(a, b, rtol=1e-12, atol=1e-14) for b in out):
            out.append(a)
        if len(out) >= limit:
            break
    return out


def check_assumptions_NL(spec: ModelSpec, rng=0, thetas: int = 6, path_steps: int = 100_000,
                         mc_samples: int = 20_000, jsr_depth: int = 4) -> AssumptionReport:
    model: ArchModel = spec.payload
    box = spec.box
    gen = as_generator(rng)
    d = model.dim
    report = AssumptionReport()
    span = box.upper - box.lower
    probe = [spec.true_theta] + [box.lower + span * gen.uniform(size=box.dims) for _ in range(thetas - 1)]

    # NL1: noise density positive with finite sup, zero mean, identity covariance
    if d == 1:
        z = np.linspace(-30, 30, 6001).reshape(-1, 1)
    else:
        z = 10.0 * gen.uniform(-1, 1, size=(20_000, d))
    lp = model.noise_logpdf(z)
    draws = model.noise_sample(gen, 200_000, d)
    moments_ok = (np.abs(draws.mean(axis=0)).max() < 0.02
                  and np.abs(np.cov(draws.T).reshape(d, d) - np.eye(d)).max() < 0.05)
    positive = bool(np.all(np.isfinite(lp)))
    sup = float(np.exp(lp.max()))
    report.add("NL1", "pass" if positive and moments_ok and np.isfinite(sup) else "fail", sup,
               "sampled positivity, grid sup of rho, Monte-Carlo mean/covariance")

    # NL2 and NL3 need states visited by the chain plus a tail region
    floor, growth, jsr_worst, offset_growth = math.inf, 0.0, 0.0, 0.0
    jsr_status = "pass"
    for theta in probe:
        path = model._path(theta, np.zeros(d), path_steps, gen)
        radius_r = float(np.quantile(np.linalg.norm(path, axis=1), 0.999))
        dirs = gen.normal(size=(400, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radii = radius_r * np.exp(gen.uniform(0.0, math.log(100.0), size=(400, 1)))
        tail = dirs * radii
        states = np.vstack([path[:: max(1, path_steps // 10_000)], tail])
        sig = model.diffusion(theta, states)
        floor = min(floor, float(np.linalg.eigvalsh(sig @ np.swapaxes(sig, 1, 2)).min()))
        far = dirs[:20] * 1e6
        growth = max(growth, float(np.linalg.norm(model.diffusion(theta, far), ord=2, axis=(1, 2)).max() / 1e6))
        offset_growth = max(offset_growth,
                            float(np.linalg.norm(model.drift_offset(theta, far), axis=1).max() / 1e6))
        amats = model.drift_matrix(theta, tail)
        if not np.all(np.isfinite(amats)):
            jsr_status = "fail"
            continue
        bound = jsr_upper_bound(_unique_matrices(amats, 8), jsr_depth)
        jsr_worst = max(jsr_worst, bound)
    nl2 = floor > 1e-12 and growth < 1e-2
    report.add("NL2", "pass" if nl2 else "fail", floor,
               f"min eigenvalue of Sigma Sigma^T over sampled states; |Sigma(x)|/|x| at 1e6 = {growth:.3g}")
    if jsr_status == "pass" and not (jsr_worst < 1.0 and offset_growth < 1e-2):
        jsr_status = "fail"
    report.add("NL3", jsr_status, jsr_worst,
               "sampled evidence: joint spectral radius bound of A(x) for |x| >= R (99.9% path radius)")

    # NL4: integrability proxies under the true parameter (scalar states only)
    if d != 1:
        report.add("NL4", "indeterminate", detail="integrability proxies need d = 1")
    else:
        theta = spec.true_theta
        states, obs = model.simulate(theta, Init.stationary(), mc_samples - 1, gen)
        xs = np.linspace(-40, 40, 4001).reshape(-1, 1)
        dx = xs[1, 0] - xs[0, 0]
        sup_plus, int_plus = np.empty(mc_samples), np.empty(mc_samples)
        obs2 = np.asarray(obs).reshape(mc_samples, -1)
        for i in range(mc_samples):
            lg = model.emission_logpdf(theta, xs, obs2[i])
            top = lg.max()
            sup_plus[i] = max(top, 0.0)
            int_plus[i] = max(top + math.log(np.exp(lg - top).sum() * dx), 0.0)
        neg = np.array([min(model.log_g(theta, states[i], obs2[i]), 0.0) for i in range(mc_samples)])
        parts = [integrability_proxy(v) for v in (sup_plus, int_plus, -neg)]
        statuses = [p[0] for p in parts]
        status = "fail" if "fail" in statuses else ("indeterminate" if "indeterminate" in statuses else "pass")
        report.add("NL4", status, max(p[1] for p in parts),
                   "Monte-Carlo proxies: E sup_x (log g)^+, E (log int g dx)^+, E (log g(X0,Y0))^-")

    # NL5: continuity in theta at fixed states and observations
    xs = gen.normal(size=(10, d))
    ys = [np.atleast_1d(v) for v in gen.normal(size=(10, model.obs_dim))]

    def features(theta):
        g = np.concatenate([model.emission_logpdf(theta, xs[i:i + 1], ys[i]) for i in range(10)])
        return np.concatenate([model.drift(theta, xs).ravel(), model.diffusion(theta, xs).ravel(), np.exp(g)])

    status, worst = continuity_probe(features, box, gen)
    report.add("NL5", status, worst, "finite-difference probe of theta -> (G, Sigma, g)")
    return report
