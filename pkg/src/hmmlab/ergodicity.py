"""Minorization, Nummelin splitting and empirical concentration checks."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import optimize, special, stats

from . import _kernels
from .core import Init, ModelSpec, ParameterBox, simulate_observations, stationary_distribution
from .errors import BudgetExceeded, InsufficientSamples, ModelError, NoMinorization
from .finite import categorical_hmm, check_stochastic
from .rng import as_generator

REJECTION_BUDGET = 1000


@dataclass(frozen=True, eq=False)
class MinorizationCert:
    """Q^m(x, .) >= epsilon nu(.) for x in the small set.

    Finite chains store ``small_set`` as a boolean mask and ``nu`` as a
    probability vector.  Continuous chains store a predicate plus a sampler
    and log-density for nu.
    """

    small_set: np.ndarray | Callable
    m: int
    epsilon: float
    nu: np.ndarray | None = None
    nu_sample: Callable | None = None
    nu_logpdf: Callable | None = None

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise NoMinorization(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.m < 1:
            raise ModelError("m must be at least 1")


@dataclass(frozen=True, eq=False)
class DriftCert:
    """Q V <= rate V + b 1_C with V >= 1."""

    V: np.ndarray | Callable
    rate: float
    b: float
    small_set: np.ndarray | Callable


def exact_minorization(trans, m: int, small_set=None) -> MinorizationCert:
    """Largest entrywise minorization of Q^m over the rows in the small set."""
    trans = check_stochastic(trans)
    d = trans.shape[0]
    mask = np.ones(d, dtype=bool) if small_set is None else _mask(small_set, d)
    qm = np.linalg.matrix_power(trans, m)
    mins = qm[mask].min(axis=0)
    eps = float(mins.sum())
    if eps <= 0.0:
        raise NoMinorization(f"no {m}-step minorization on this small set; try a larger m")
    return MinorizationCert(mask, m, min(eps, 1.0), mins / eps)


def _mask(small_set, d: int) -> np.ndarray:
    s = np.asarray(small_set)
    if s.dtype == bool:
        if s.shape != (d,):
            raise ModelError("small-set mask has the wrong length")
        return s.copy()
    mask = np.zeros(d, dtype=bool)
    mask[s.astype(int)] = True
    return mask


def check_drift_finite(trans, cert: DriftCert) -> float:
    """Largest violation max_x {QV(x) - rate V(x) - b 1_C(x)}; <= 0 means the certificate holds."""
    trans = check_stochastic(trans)
    V = np.asarray(cert.V, dtype=float)
    if np.any(V < 1.0):
        raise ModelError("drift function must satisfy V >= 1")
    ind = _mask(cert.small_set, trans.shape[0]).astype(float)
    return float(np.max(trans @ V - cert.rate * V - cert.b * ind))


def check_drift_sampled(step: Callable, V: Callable, cert: DriftCert, states, draws: int, rng) -> float:
    """Monte-Carlo version of :func:`check_drift_finite` at the supplied states.

    ``step(x, size, gen)`` draws ``size`` successors of state ``x``.  The
    result is evidence only: it checks sampled points, not the whole space.
    """
    gen = as_generator(rng)
    worst = -math.inf
    for x in np.atleast_1d(states):
        qv = float(np.mean(V(step(x, draws, gen))))
        worst = max(worst, qv - cert.rate * float(V(np.atleast_1d(x))[0]) - cert.b * float(bool(cert.small_set(x))))
    return worst


def ar1_minorization(phi: float, sigma: float, c: float) -> MinorizationCert:
    """One-step minorization of x' = phi x + sigma z on C = [-c, c].

    min over x in C of the N(phi x, sigma^2) density at x' is attained at the
    far end of C, giving nu proportional to N(0, sigma^2) at |x'| + |phi| c
    and epsilon = 2 P(Z > |phi| c / sigma).
    """
    a = abs(phi) * c
    eps = float(2.0 * special.ndtr(-a / sigma))

    def logpdf(x):
        r = np.abs(x) + a
        return -0.5 * (r / sigma) ** 2 - math.log(sigma) - 0.5 * math.log(2.0 * math.pi) - math.log(eps)

    def sample(gen, size):
        lo = a / sigma
        mag = stats.truncnorm.rvs(lo, np.inf, size=size, random_state=gen) * sigma - a
        return np.where(gen.random(size) < 0.5, -mag, mag)

    return MinorizationCert(lambda x: abs(x) <= c, 1, eps, nu_sample=sample, nu_logpdf=logpdf)


@dataclass(frozen=True, eq=False)
class RegenerationTrace:
    states: np.ndarray
    bells: np.ndarray   # -1 where no coin was flipped, else the bell d_n
    regen: np.ndarray   # regeneration times
    m: int

    @property
    def sigma(self) -> np.ndarray:
        """Times at which a bell was flipped (visits to the small set)."""
        return np.flatnonzero(self.bells >= 0)


def _finite_bridge(trans: np.ndarray, m: int) -> np.ndarray:
    """bridge[r, x, z, w] = P(X_1 = w | X_0 = x, X_{r+1} = z), cumulative in w."""
    d = trans.shape[0]
    out = np.zeros((m, d, d, d))
    for r in range(1, m):
        qr = np.linalg.matrix_power(trans, r)
        w = trans[:, None, :] * qr.T[None, :, :]      # [x, z, w] = Q(x,w) Q^r(w,z)
        tot = w.sum(axis=2, keepdims=True)
        w = np.where(tot > 0, w / np.where(tot > 0, tot, 1.0), 1.0 / d)
        out[r] = np.cumsum(w, axis=2)
    return out


def split_simulate(chain, init, cert: MinorizationCert, steps: int, rng, theta=None) -> RegenerationTrace:
    """Simulate the split chain for ``steps`` transitions.

    ``chain`` is a transition matrix (finite case) or an ArchModel with
    scalar state plus ``theta`` (continuous case, m = 1 only).  ``init`` is an
    :class:`Init` or a starting state.
    """
    gen = as_generator(rng)
    if isinstance(chain, np.ndarray) or isinstance(chain, (list, tuple)):
        return _split_finite(check_stochastic(chain), init, cert, steps, gen)
    if cert.m != 1:
        raise ModelError("continuous splitting with m >= 2 needs the bridge law and is unsupported")
    return _split_continuous(chain, theta, init, cert, steps, gen)


def _split_finite(trans, init, cert, steps, gen) -> RegenerationTrace:
    d = trans.shape[0]
    if isinstance(init, Init):
        if init.kind == "point":
            x0 = int(init.point)
        else:
            w = stationary_distribution(trans) if init.kind == "stationary" else np.asarray(init.weights, float)
            x0 = int(gen.choice(d, p=w / w.sum()))
    else:
        x0 = int(init)
    m, eps = cert.m, cert.epsilon
    qm = np.linalg.matrix_power(trans, m)
    nu = np.asarray(cert.nu, dtype=float)
    mask = _mask(cert.small_set, d)
    if np.any(qm[mask] < eps * nu[None, :] - 1e-12):
        raise NoMinorization("certificate does not minorize Q^m on its small set")
    if eps < 1.0:
        resid = np.clip((qm - eps * nu[None, :]) / (1.0 - eps), 0.0, None)
        tot = resid.sum(axis=1, keepdims=True)
        # rows outside the small set are never drawn from; keep them finite
        resid = np.where(tot > 0, resid / np.where(tot > 0, tot, 1.0), nu[None, :])
    else:
        resid = np.tile(nu, (d, 1))
    u_step, u_bell, u_draw = gen.random(steps), gen.random(steps), gen.random(steps)
    states, bells, regen = _kernels.split_chain(
        np.cumsum(trans, axis=1), np.cumsum(nu), np.cumsum(resid, axis=1), _finite_bridge(trans, m),
        mask, m, x0, u_step, u_bell, u_draw, eps)
    return RegenerationTrace(states, bells, np.flatnonzero(regen), m)


def _split_continuous(model, theta, init, cert, steps, gen) -> RegenerationTrace:
    if model.dim != 1:
        raise ModelError("continuous splitting is implemented for scalar states")
    x = float(np.ravel(init.point)[0]) if isinstance(init, Init) else float(init)
    eps = cert.epsilon
    states = np.empty(steps + 1)
    bells = -np.ones(steps + 1, dtype=np.int64)
    regen = []
    states[0] = x
    for k in range(steps):
        xk = np.array([[x]])
        if cert.small_set(x):
            bell = int(gen.random() < eps)
            bells[k] = bell
            if bell:
                x = float(cert.nu_sample(gen, 1)[0])
                regen.append(k + 1)
            else:
                x = _residual_draw(model, theta, xk, cert, gen)
        else:
            x = float(model._path(theta, xk[0], 1, gen)[1, 0])
        states[k + 1] = x
    return RegenerationTrace(states, bells, np.array(regen, dtype=np.int64), 1)


def _residual_draw(model, theta, xk, cert, gen) -> float:
    eps = cert.epsilon
    for _ in range(REJECTION_BUDGET):
        prop = model._path(theta, xk[0], 1, gen)[1:2]
        lq = model.log_q_batch(theta, xk, prop)[0]
        accept = 1.0 - eps * math.exp(cert.nu_logpdf(prop[0, 0]) - lq)
        if gen.random() < accept:
            return float(prop[0, 0])
    raise BudgetExceeded(f"residual kernel rejected {REJECTION_BUDGET} proposals in a row")


def block_sums(trace: RegenerationTrace, f, target_mean: float) -> np.ndarray:
    """xi_i = sum of f(X_k) - target_mean over [regen_i, regen_{i+1})."""
    if trace.regen.size < 2:
        raise InsufficientSamples("block sums need at least two regenerations")
    vals = np.asarray(f)[trace.states] if not callable(f) else np.asarray(f(trace.states), dtype=float)
    # per-segment sums so equal blocks give bitwise equal values
    return np.add.reduceat(vals - target_mean, trace.regen)[:-1]


@dataclass(frozen=True)
class RegenTail:
    K: np.ndarray
    exp_moment: np.ndarray
    slope: float
    gaps: np.ndarray


def regen_tail(trace: RegenerationTrace, K_grid=None, min_count: int = 10) -> RegenTail:
    """Exponential moments and geometric tail slope of the inter-regeneration times.

    The slope is the least-squares slope of log P(gap >= k) against k over
    the k whose survival count is at least ``min_count``; NaN when fewer than
    two such k exist (for instance when every gap is 1).
    """
    gaps = np.diff(trace.regen)
    if gaps.size < 1000:
        raise InsufficientSamples(f"{gaps.size} inter-regeneration times, need 1000")
    K = np.asarray(K_grid if K_grid is not None else np.geomspace(1.0, 1000.0, 31), dtype=float)
    with np.errstate(over="ignore"):
        moments = np.array([np.mean(np.exp(gaps / k)) for k in K])
    ks = np.arange(1, gaps.max() + 1)
    counts = np.array([(gaps >= k).sum() for k in ks])
    keep = counts >= min_count
    slope = float("nan")
    if keep.sum() >= 2:
        slope = float(np.polyfit(ks[keep], np.log(counts[keep] / gaps.size), 1)[0])
    return RegenTail(K, moments, slope, gaps)


# -- concentration -------------------------------------------------------------

@dataclass(frozen=True)
class TailTable:
    n: int
    t: np.ndarray
    tail: np.ndarray
    count: np.ndarray
    replicates: int
    mean: float
    K_hat: float

    @property
    def u(self) -> np.ndarray:
        return np.minimum(self.t ** 2 / self.n, self.t)

    def bound(self, K: float) -> np.ndarray:
        return K * np.exp(-self.u / K)


def tail_shape_fit(t, tail, n: int) -> float:
    """K minimizing sum (log tail - log(K exp(-u/K)))^2 over points with tail > 0."""
    t, tail = np.asarray(t, dtype=float), np.asarray(tail, dtype=float)
    keep = tail > 0
    if not np.any(keep):
        raise InsufficientSamples("every tail estimate is zero")
    u = np.minimum(t[keep] ** 2 / n, t[keep])
    lp = np.log(tail[keep])

    def loss(logk):
        k = math.exp(logk)
        return float(np.sum((lp - (logk - u / k)) ** 2))

    res = optimize.minimize_scalar(loss, bounds=(-10.0, 20.0), method="bounded",
                                   options={"xatol": 1e-10})
    return math.exp(res.x)


def window_sums(obs: np.ndarray, f: Callable, s: int, n: int) -> np.ndarray:
    """sum_{i=1..n} f(Y_i^{i+s}) per row of ``obs`` (shape (R, >= n+s+1))."""
    win = np.lib.stride_tricks.sliding_window_view(obs[:, 1:n + s + 1], s + 1, axis=1)
    return np.asarray(f(win), dtype=float).sum(axis=1)


def empirical_tail(spec: ModelSpec, theta, f: Callable, s: int, n: int, t_grid, replicates: int, rng,
                   mean: float | None = None, mean_steps: int = 10_000_000, chunk: int = 2000,
                   init: Init | None = None) -> TailTable:
    """P(|sum_{i=1..n} f(Y_i^{i+s}) - n mean| >= t) by Monte Carlo under theta.

    ``f`` maps an array of windows (..., s+1) to values and must be bounded.
    The stationary mean is estimated from one long path unless given.
    """
    gen = as_generator(rng)
    init = init or Init.stationary()
    if mean is None:
        rows = 100
        long = simulate_observations(spec, theta, init, mean_steps // rows + s, rows, gen)
        mean = float(window_sums(long, f, s, mean_steps // rows).sum() / mean_steps)
    t = np.asarray(t_grid, dtype=float)
    dev = np.empty(replicates)
    done = 0
    while done < replicates:
        size = min(chunk, replicates - done)
        obs = simulate_observations(spec, theta, init, n + s, size, gen)
        dev[done:done + size] = np.abs(window_sums(obs, f, s, n) - n * mean)
        done += size
    dev.sort()
    count = replicates - np.searchsorted(dev, t, side="left")
    tail = count / replicates
    return TailTable(n, t, tail, count, replicates, mean, tail_shape_fit(t, tail, n))


def observed_chain(trans) -> ModelSpec:
    """A finite chain whose states are observed directly (identity emissions)."""
    trans = check_stochastic(trans)
    payload = categorical_hmm(trans, np.eye(trans.shape[0]))
    return ModelSpec("finite", payload, ParameterBox([0.0], [1.0]), np.array([0.0]), name="observed-chain")
