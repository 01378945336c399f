"""Approximate maximum likelihood over a parameter box and the experiments built on it."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import finite, gaussian, nonlinear
from .core import Init, ModelSpec, ParameterBox, simulate
from .errors import DegenerateLikelihood, ModelError
from .rng import RngStream

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
DEFAULT_GRID = nonlinear.Grid(-20.0, 20.0, 800)


@dataclass(frozen=True)
class LikelihoodSurface:
    thetas: np.ndarray
    values: np.ndarray
    n: int


@dataclass(frozen=True)
class MleResult:
    theta_hat: np.ndarray
    value: float
    gap_bound: float
    evaluations: int


def _clean(v) -> float:
    v = float(v)
    return -math.inf if math.isnan(v) else v


def _golden_max(f: Callable[[float], float], a: float, b: float, tol: float, x0: float, f0: float):
    """Golden-section search for a maximum on [a, b]; never returns worse than (x0, f0).

    A candidate replaces the incumbent only if strictly better, so flat
    objectives keep the starting point.
    """
    best_x, best_f, evals = x0, f0, 0
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    evals += 2
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
        evals += 1
    # the bracket endpoints matter when the maximum sits on the box boundary
    for x, fx in ((c, fc), (d, fd), (a, f(a)), (b, f(b))):
        if fx > best_f:
            best_x, best_f = x, fx
    return best_x, best_f, evals + 2


def likelihood_surface(loglik: Callable, box: ParameterBox, per_dim: int, n: int = 1,
                       parallelism: int = 1) -> LikelihoodSurface:
    thetas = box.grid(per_dim)
    if parallelism > 1:
        with ThreadPoolExecutor(parallelism) as pool:
            vals = list(pool.map(loglik, thetas))
    else:
        vals = [loglik(t) for t in thetas]
    return LikelihoodSurface(thetas, np.array([_clean(v) for v in vals]), n)


def approx_mle(loglik: Callable[[np.ndarray], float], box: ParameterBox, per_dim: int = 33,
               tol: float = 1e-4, sweeps: int = 3, surface: LikelihoodSurface | None = None,
               parallelism: int = 1) -> MleResult:
    """Coarse grid scan followed by coordinate-wise golden-section refinement.

    Ties on the grid go to the lexicographically smallest parameter.  Each
    coordinate is refined inside one grid cell either side of the incumbent.
    """
    if per_dim < 2:
        raise ModelError("coarse grid needs at least two points per dimension")
    if tol <= 0:
        raise ModelError("refinement tolerance must be positive")
    if surface is None:
        surface = likelihood_surface(loglik, box, per_dim, parallelism=parallelism)
    evals = surface.values.size
    i = int(np.argmax(surface.values))
    grid_best = float(surface.values[i])
    if grid_best == -math.inf:
        raise DegenerateLikelihood("log-likelihood is -inf at every grid point")
    theta = surface.thetas[i].copy()
    value = grid_best
    step = (box.upper - box.lower) / (per_dim - 1)
    for _ in range(sweeps):
        moved = False
        for j in range(box.dims):
            lo = max(box.lower[j], theta[j] - step[j])
            hi = min(box.upper[j], theta[j] + step[j])

            def f(x, j=j):
                t = theta.copy()
                t[j] = x
                return _clean(loglik(t))

            x, fx, k = _golden_max(f, lo, hi, tol, theta[j], value)
            evals += k
            if fx > value:
                theta[j], value, moved = x, fx, True
        if not moved:
            break
    return MleResult(theta, value, max(0.0, grid_best - value), evals)


# -- likelihood dispatch ------------------------------------------------------------

def loglik_path(spec: ModelSpec, theta, init: Init, y, grid: nonlinear.Grid | None = None) -> np.ndarray:
    """Cumulative log p^nu(y_0^k; theta) for k = 0..n, dispatched on the family.

    With ``init.kind == "lambda"`` the improper likelihood p^lambda is returned
    (entries before the observability horizon are +inf for linear-Gaussian models).
    """
    theta = spec.box.check(theta)
    model = spec.payload
    if init.kind == "lambda":
        if spec.family == "finite":
            return finite.forward_cumulative(model, theta, np.ones(model.n_states), y)
        if spec.family == "linear-gaussian":
            return gaussian.improper_forward_cumulative(model, theta, y)
        raise ModelError("improper likelihoods are available for finite and linear-Gaussian models")
    if spec.family == "finite":
        return finite.forward_cumulative(model, theta, model.init_weights(theta, init), y)
    if spec.family == "linear-gaussian":
        mean, cov = model.gaussian_init(theta, init)
        return gaussian.kalman_cumulative(model, theta, mean, cov, y)
    return nonlinear.quadrature_cumulative(model, theta, init, grid or DEFAULT_GRID, y)


def _stream(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    if isinstance(rng, np.random.Generator):
        return RngStream(int(rng.integers(0, 2 ** 63)))
    return RngStream(int(rng))


def simulate_path(spec: ModelSpec, theta, init: Init, n: int, rng):
    return simulate(spec, theta, init, n, _stream(rng).generator())[1]


def entropy_rate(spec: ModelSpec, theta_star, init: Init, schedule, rng,
                 data_init: Init | None = None, grid: nonlinear.Grid | None = None):
    """[(n, n^-1 log p^nu(Y_0^n; theta*))] along one path simulated under theta*.

    ``data_init`` is the law of the simulated X_0 (stationary by default);
    ``init`` is the measure nu used in the likelihood.
    """
    schedule = [int(n) for n in schedule]
    y = simulate_path(spec, theta_star, data_init or Init.stationary(), max(schedule), rng)
    cum = loglik_path(spec, theta_star, init, y, grid)
    return [(n, float(cum[n]) / n) for n in schedule]


def orbit_distance(theta_hat, theta_star, box: ParameterBox) -> float:
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    return float(min(np.linalg.norm(theta_hat - m) for m in box.orbit(theta_star)))


@dataclass(frozen=True)
class ConsistencyReport:
    schedule: tuple[int, ...]
    theta_hats: np.ndarray   # (len(schedule), replicates, dims)
    distances: np.ndarray    # (len(schedule), replicates)
    values: np.ndarray       # normalized log-likelihood at theta_hat

    @property
    def medians(self) -> np.ndarray:
        return np.median(self.distances, axis=1)

    def quantiles(self, qs=(0.1, 0.5, 0.9)) -> np.ndarray:
        return np.quantile(self.distances, qs, axis=1).T


def _replicate(spec, theta_star, init, data_init, schedule, stream, per_dim, tol, sweeps, grid):
    y = simulate_path(spec, theta_star, data_init, schedule[-1], stream)
    # one grid scan on the longest path serves every horizon through its prefixes
    thetas = spec.box.grid(per_dim)
    table = np.array([loglik_path(spec, t, init, y, grid) for t in thetas])
    table = np.where(np.isnan(table), -np.inf, table)
    out = []
    for n in schedule:
        prefix = y[: n + 1]
        surface = LikelihoodSurface(thetas, table[:, n] / n, n)
        res = approx_mle(lambda t, n=n, prefix=prefix: loglik_path(spec, t, init, prefix, grid)[n] / n,
                         spec.box, per_dim, tol, sweeps, surface)
        out.append(res)
    return out


def consistency_experiment(spec: ModelSpec, theta_star, init: Init, schedule, replicates: int, rng,
                           data_init: Init | None = None, per_dim: int = 33, tol: float = 1e-4,
                           sweeps: int = 3, parallelism: int = 1,
                           grid: nonlinear.Grid | None = None, order=None) -> ConsistencyReport:
    """Simulate under theta*, maximize the likelihood started from ``init``, measure orbit distance.

    Replicate r always uses stream ``rng.child(r)``, so the report does not
    depend on ``parallelism`` or on the evaluation ``order``.
    """
    schedule = tuple(int(n) for n in schedule)
    if not schedule or any(b <= a for a, b in zip(schedule, schedule[1:])) or schedule[0] < 1:
        raise ModelError("schedule must be a strictly increasing list of positive horizons")
    theta_star = spec.box.check(theta_star)
    root = _stream(rng)
    data_init = data_init or Init.stationary()
    idx = list(range(replicates)) if order is None else [int(i) for i in order]
    if sorted(idx) != list(range(replicates)):
        raise ModelError("order must be a permutation of the replicate indices")

    def job(r):
        return r, _replicate(spec, theta_star, init, data_init, schedule, root.child(r),
                             per_dim, tol, sweeps, grid)

    if parallelism > 1:
        with ThreadPoolExecutor(parallelism) as pool:
            results = dict(pool.map(job, idx))
    else:
        results = dict(job(r) for r in idx)
    dims = spec.box.dims
    hats = np.empty((len(schedule), replicates, dims))
    dist = np.empty((len(schedule), replicates))
    vals = np.empty((len(schedule), replicates))
    for r in range(replicates):
        for i, res in enumerate(results[r]):
            hats[i, r] = res.theta_hat
            dist[i, r] = orbit_distance(res.theta_hat, theta_star, spec.box)
            vals[i, r] = res.value
    return ConsistencyReport(schedule, hats, dist, vals)
