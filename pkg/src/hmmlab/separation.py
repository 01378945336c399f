"""Empirical identifiability: separation witnesses, decay tests and the normalized improper law."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import optimize

from . import finite, gaussian
from .core import Init, ModelSpec, simulate_observations
from .errors import DegenerateLikelihood, ModelError, NotSeparated
from .finite import CategoricalEmission
from .rng import as_generator

H_BOUND = 10.0
MAX_PATTERNS = 4096


@dataclass(frozen=True, eq=False)
class SeparationWitness:
    s: int
    statistic: str
    scale: float
    center: float
    mean_star: float
    mean_theta: float
    se_star: float
    se_theta: float
    bound: float
    _stat: Callable

    def __call__(self, windows: np.ndarray) -> np.ndarray:
        """h on an array of windows with trailing axis of length s + 1."""
        return np.clip(self.scale * (self._stat(windows) - self.center), -self.bound, self.bound)


def _batch_se(values: np.ndarray, batches: int = 50) -> float:
    """Standard error of the mean of a stationary sequence by batch means."""
    v = values[: values.size - values.size % batches].reshape(batches, -1).mean(axis=1)
    return float(v.std(ddof=1) / math.sqrt(batches))


def _dictionary(s: int, discrete: bool, alphabet: int) -> list[tuple[str, Callable]]:
    out = []
    if discrete:
        if alphabet ** (s + 1) <= MAX_PATTERNS:
            for pat in itertools.product(range(alphabet), repeat=s + 1):
                arr = np.array(pat)
                out.append((f"pattern{pat}", lambda w, arr=arr: np.all(w == arr, axis=-1).astype(float)))
        for sym in range(alphabet):
            out.append((f"symbol{sym}", lambda w, sym=sym: (w[..., 0] == sym).astype(float)))
        for i, j in itertools.combinations(range(s + 1), 2):
            out.append((f"match({i},{j})", lambda w, i=i, j=j: (w[..., i] == w[..., j]).astype(float)))
        return out
    out.append(("y", lambda w: w[..., 0].astype(float)))
    out.append(("y^2", lambda w: w[..., 0].astype(float) ** 2))
    out.append(("|y|", lambda w: np.abs(w[..., 0]).astype(float)))
    if s >= 1:
        out.append(("window mean", lambda w: w.astype(float).mean(axis=-1)))
    for lag in range(1, s + 1):
        out.append((f"y0*y{lag}", lambda w, lag=lag: w[..., 0].astype(float) * w[..., lag]))
    return out


def _windows(obs: np.ndarray, s: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(obs, s + 1, axis=-1)


def _fit_clipped(stat_star, stat_theta, bound):
    """(scale, center) with clip(scale (stat - center)) averaging to 1 under star and 0 under theta."""
    gap = stat_star.mean() - stat_theta.mean()
    scale0 = 1.0 / gap
    center0 = stat_theta.mean()

    def means(p):
        a, c = p
        return (np.clip(a * (stat_star - c), -bound, bound).mean() - 1.0,
                np.clip(a * (stat_theta - c), -bound, bound).mean())

    if max(abs(v) for v in means((scale0, center0))) < 1e-12:
        return scale0, center0
    sol = optimize.root(means, [scale0, center0], method="hybr")
    if sol.success and max(abs(v) for v in means(sol.x)) < 1e-9:
        return float(sol.x[0]), float(sol.x[1])
    return scale0, center0


def _is_discrete(spec: ModelSpec) -> tuple[bool, int]:
    payload = spec.payload
    emission = getattr(payload, "emission", None)
    if isinstance(emission, CategoricalEmission):
        return True, emission.alphabet_size(spec.true_theta)
    return False, 0


def build_witness(spec: ModelSpec, theta_star, theta, s: int, calibration_samples: int, rng,
                  init: Init | None = None, z_threshold: float = 3.0) -> SeparationWitness:
    """Bounded h on windows of length s + 1 with mean about 1 under theta* and 0 under theta.

    ``calibration_samples`` windows are drawn from a stationary path under
    each law; the first half selects the statistic and the rescaling, the
    held-out second half estimates the reported calibration means.
    """
    gen = as_generator(rng)
    init = init or Init.stationary()
    half = calibration_samples // 2
    if half < 100:
        raise ModelError("need at least 200 calibration samples")
    obs_star = simulate_observations(spec, theta_star, init, 2 * half + s - 1, 1, gen)[0]
    obs_theta = simulate_observations(spec, theta, init, 2 * half + s - 1, 1, gen)[0]
    obs_star, obs_theta = np.asarray(obs_star).reshape(-1), np.asarray(obs_theta).reshape(-1)
    w_star, w_theta = _windows(obs_star, s), _windows(obs_theta, s)
    build = slice(0, half)
    hold = slice(half, 2 * half)
    discrete, alphabet = _is_discrete(spec)
    best = None
    for name, stat in _dictionary(s, discrete, alphabet):
        a, b = stat(w_star[build]), stat(w_theta[build])
        se = math.hypot(_batch_se(a), _batch_se(b))
        gap = a.mean() - b.mean()
        z = abs(gap) / se if se > 0 else (math.inf if gap != 0 else 0.0)
        if best is None or z > best[0]:
            best = (z, name, stat, a, b)
    z, name, stat, a, b = best
    if not z >= z_threshold:
        raise NotSeparated(f"largest standardized gap {z:.2f} is below {z_threshold}; try a larger s")
    scale, center = _fit_clipped(a, b, H_BOUND)
    h = lambda v: np.clip(scale * (v - center), -H_BOUND, H_BOUND)
    h_star, h_theta = h(stat(w_star[hold])), h(stat(w_theta[hold]))
    # the targets 1 and 0 were fitted on the build half, so its noise counts too
    se_star = math.hypot(_batch_se(h_star), _batch_se(h(a)))
    se_theta = math.hypot(_batch_se(h_theta), _batch_se(h(b)))
    return SeparationWitness(s, name, scale, center, float(h_star.mean()), float(h_theta.mean()),
                             se_star, se_theta, H_BOUND, stat)


# -- decay test ------------------------------------------------------------------

def model_sampler(spec: ModelSpec, theta, init: Init | None = None) -> Callable:
    """sampler(length, replicates, gen) -> observation array (replicates, length)."""
    init = init or Init.stationary()

    def sample(length, replicates, gen):
        obs = simulate_observations(spec, theta, init, length - 1, replicates, gen)
        return np.asarray(obs).reshape(replicates, length)

    return sample


@dataclass(frozen=True)
class SeparationReport:
    schedule: tuple[int, ...]
    p_star: np.ndarray
    p_theta: np.ndarray
    zero_star: np.ndarray     # True where the estimate is a rule-of-three upper bound
    zero_theta: np.ndarray
    slope: float
    slope_se: float

    @property
    def slope_ci(self) -> tuple[float, float]:
        return self.slope - 1.96 * self.slope_se, self.slope + 1.96 * self.slope_se


def _membership_rate(sampler, witness, n, replicates, gen, chunk) -> tuple[float, bool]:
    hits, done = 0, 0
    while done < replicates:
        size = min(chunk, replicates - done)
        obs = sampler(n + 1, size, gen)
        h = witness(_windows(obs[:, 1:], witness.s))
        hits += int(np.sum(h.mean(axis=1) > 0.5))
        done += size
    if hits == 0:
        return 3.0 / replicates, True
    return hits / replicates, False


def decay_slope(schedule, p, replicates: int) -> tuple[float, float]:
    """Weighted least-squares slope of log p on n with delta-method variances."""
    x = np.asarray(schedule, dtype=float)
    p = np.asarray(p, dtype=float)
    var = (1.0 - p) / (replicates * p)
    var = np.maximum(var, 1.0 / (replicates * replicates))
    w = 1.0 / var
    X = np.column_stack([np.ones_like(x), x])
    cov = np.linalg.inv(X.T @ (w[:, None] * X))
    beta = cov @ (X.T @ (w * np.log(p)))
    return float(beta[1]), float(math.sqrt(cov[1, 1]))


def separation_test(sampler_star, sampler_theta, witness: SeparationWitness, schedule, replicates: int,
                    rng, chunk: int = 2000) -> SeparationReport:
    """Estimate P(A_n) under both laws, A_n = {window average of h > 1/2}.

    Every horizon uses fresh draws.  Zero counts are replaced by the
    rule-of-three bound 3/replicates and flagged.
    """
    gen = as_generator(rng)
    schedule = tuple(int(n) for n in schedule)
    if any(n <= witness.s for n in schedule):
        raise ModelError("every horizon must exceed the window length")
    ps, pt, zs, zt = [], [], [], []
    for n in schedule:
        p, z = _membership_rate(sampler_star, witness, n, replicates, gen, chunk)
        ps.append(p)
        zs.append(z)
        p, z = _membership_rate(sampler_theta, witness, n, replicates, gen, chunk)
        pt.append(p)
        zt.append(z)
    slope, se = decay_slope(schedule, pt, replicates)
    return SeparationReport(schedule, np.array(ps), np.array(pt), np.array(zs), np.array(zt), slope, se)


# -- relative entropy --------------------------------------------------------------

def kl_lower_bound(p_a: float, q_a: float) -> float:
    """p log p - p log q - 1, a lower bound on KL(P || Q) from one event A."""
    if not (0.0 <= p_a <= 1.0 and 0.0 <= q_a <= 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    if p_a == 0.0:
        return -1.0
    if q_a == 0.0:
        return math.inf
    return p_a * math.log(p_a) - p_a * math.log(q_a) - 1.0


# -- normalized improper law -------------------------------------------------------

def _improper_cumulative(spec: ModelSpec, theta, y) -> np.ndarray:
    if spec.family == "finite":
        return finite.forward_cumulative(spec.payload, theta, np.ones(spec.payload.n_states), y)
    if spec.family == "linear-gaussian":
        return gaussian.improper_forward_cumulative(spec.payload, theta, y)
    raise ModelError("the normalized improper law is defined for finite and linear-Gaussian models")


def _stationary_cumulative(spec: ModelSpec, theta, y) -> np.ndarray:
    if spec.family == "finite":
        w = spec.payload.init_weights(theta, Init.stationary())
        return finite.forward_cumulative(spec.payload, theta, w, y)
    model = spec.payload
    d = model.dims(theta)[0]
    return gaussian.kalman_cumulative(model, theta, np.zeros(d), model.stationary_cov(theta), y)


def improper_law_weight(spec: ModelSpec, theta, theta_star, r: int, y) -> float:
    """log density of the normalized improper law at y_0^n.

    log p^lambda(y_0^n; theta) - log p^lambda(y_0^r; theta) + log pbar(y_0^r; theta*),
    where pbar is the stationary likelihood.
    """
    theta = spec.box.check(theta)
    theta_star = spec.box.check(theta_star)
    n = len(y) - 1
    if r > n:
        raise ModelError(f"need n >= r, got n = {n}, r = {r}")
    lam = _improper_cumulative(spec, theta, y)
    if not np.isfinite(lam[r]) or lam[r] == -np.inf:
        raise DegenerateLikelihood(f"improper likelihood of the first {r + 1} observations is not positive and finite")
    star = _stationary_cumulative(spec, theta_star, y[: r + 1])
    return float(lam[n] - lam[r] + star[r])
