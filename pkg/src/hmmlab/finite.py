"""Finite-state hidden Markov models.

States are labelled ``0..d-1``.  Observation densities are taken w.r.t. the
counting measure for finite alphabets and Lebesgue measure for real-valued
emissions; lambda on the state space is the counting measure, so ``l = 1``
and ``q_theta`` is the transition matrix itself.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce
from typing import Callable

import numpy as np
from scipy.sparse.csgraph import connected_components

from . import _kernels
from .core import (AssumptionReport, Init, ModelSpec, ParameterBox, continuity_probe,
                   integrability_proxy, stationary_distribution)
from .errors import ModelError
from .rng import as_generator

_LOG_2PI = math.log(2.0 * math.pi)


def _safe_log(a):
    with np.errstate(divide="ignore"):
        return np.log(a)


def check_stochastic(trans, tol: float = 1e-12) -> np.ndarray:
    trans = np.asarray(trans, dtype=float)
    if trans.ndim != 2 or trans.shape[0] != trans.shape[1]:
        raise ModelError("transition matrix must be square")
    if np.any(trans < 0) or np.any(np.abs(trans.sum(axis=1) - 1.0) > tol):
        raise ModelError("transition matrix must be row-stochastic")
    return trans


@dataclass(frozen=True)
class CategoricalEmission:
    """Emission over the alphabet ``0..K-1``; ``probs(theta)`` is d x K."""

    probs: Callable[[np.ndarray], np.ndarray]

    def log_matrix(self, theta, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.int64)
        return _safe_log(np.asarray(self.probs(theta), dtype=float))[:, y].T

    def sample(self, theta, states, gen) -> np.ndarray:
        cum = np.cumsum(np.asarray(self.probs(theta), dtype=float), axis=1)
        u = gen.random(states.shape)
        k = cum.shape[1]
        return np.minimum((u[..., None] >= cum[states]).sum(axis=-1), k - 1).astype(np.int64)

    def alphabet_size(self, theta) -> int:
        return int(np.asarray(self.probs(theta)).shape[1])


@dataclass(frozen=True)
class GaussianEmission:
    """Scalar Gaussian emission N(means(theta)[x], sds(theta)[x]**2)."""

    means: Callable[[np.ndarray], np.ndarray]
    sds: Callable[[np.ndarray], np.ndarray]

    def log_matrix(self, theta, y) -> np.ndarray:
        y = np.asarray(y, dtype=float).reshape(-1, 1)
        mu = np.asarray(self.means(theta), dtype=float)
        sd = np.asarray(self.sds(theta), dtype=float)
        z = (y - mu) / sd
        return -0.5 * z * z - np.log(sd) - 0.5 * _LOG_2PI

    def sample(self, theta, states, gen) -> np.ndarray:
        mu = np.asarray(self.means(theta), dtype=float)
        sd = np.asarray(self.sds(theta), dtype=float)
        return mu[states] + sd[states] * gen.standard_normal(states.shape)


@dataclass(frozen=True)
class FiniteHMM:
    n_states: int
    transition: Callable[[np.ndarray], np.ndarray]
    emission: CategoricalEmission | GaussianEmission
    family = "finite"

    def trans(self, theta) -> np.ndarray:
        t = check_stochastic(self.transition(theta))
        if t.shape[0] != self.n_states:
            raise ModelError("transition matrix size does not match n_states")
        return t

    def log_emissions(self, theta, y) -> np.ndarray:
        return self.emission.log_matrix(theta, y)

    def init_weights(self, theta, init: Init) -> np.ndarray:
        d = self.n_states
        if init.kind == "point":
            w = np.zeros(d)
            w[int(init.point)] = 1.0
            return w
        if init.kind == "stationary":
            return stationary_distribution(self.trans(theta))
        if init.kind == "weights":
            w = np.asarray(init.weights, dtype=float)
            if w.shape != (d,):
                raise ModelError("initial weights have the wrong length")
            return w
        raise ModelError(f"init kind {init.kind!r} is not defined for finite chains")

    def _start_states(self, theta, init, size, gen) -> np.ndarray:
        w = self.init_weights(theta, init)
        return gen.choice(self.n_states, size=size, p=w / w.sum()).astype(np.int64)

    def simulate_states(self, theta, init: Init, n: int, replicates: int, gen) -> np.ndarray:
        cum = np.cumsum(self.trans(theta), axis=1)
        x0 = self._start_states(theta, init, replicates, gen)
        return _kernels.simulate_chain(cum, x0, gen.random((replicates, n)))

    def simulate(self, theta, init: Init, n: int, gen):
        states = self.simulate_states(theta, init, n, 1, gen)[0]
        return states, self.emission.sample(theta, states, gen)

    def simulate_observations(self, theta, init, n, replicates, gen):
        states = self.simulate_states(theta, init, n, replicates, gen)
        return self.emission.sample(theta, states, gen)

    def log_g(self, theta, x, y) -> float:
        return float(self.emission.log_matrix(theta, np.atleast_1d(y))[0, int(x)])

    def log_q(self, theta, x, x2) -> float:
        return float(_safe_log(self.trans(theta)[int(x), int(x2)]))

    def q_sup(self, theta) -> float:
        return float(self.trans(theta).max())


# -- likelihoods -------------------------------------------------------------

def forward_cumulative(model: FiniteHMM, theta, init_weights, y) -> np.ndarray:
    """log p^rho(y_0^k; theta) for every k, rho given by non-negative weights."""
    w = np.asarray(init_weights, dtype=float)
    if w.shape != (model.n_states,) or np.any(w < 0):
        raise ModelError("init weights must be a non-negative vector of length d")
    if not np.any(w > 0):
        raise ModelError("init weights are all zero")
    log_emit = np.ascontiguousarray(model.log_emissions(theta, y), dtype=float)
    log_trans = _safe_log(model.trans(theta))
    return _kernels.forward_cumulative(_safe_log(w), log_trans, log_emit)


def forward_loglik(model: FiniteHMM, theta, init_weights, y) -> float:
    """log p^rho(y_0^n; theta) by the log-sum-exp forward recursion."""
    return float(forward_cumulative(model, theta, init_weights, y)[-1])


def counting_p_lambda(model: FiniteHMM, theta, y) -> float:
    """Improper likelihood started from the counting measure on the states."""
    return forward_loglik(model, theta, np.ones(model.n_states), y)


# -- structure of the transition matrix -----------------------------------------

@dataclass(frozen=True)
class ErgodicDecomposition:
    classes: tuple[tuple[int, ...], ...]
    transient: tuple[int, ...]
    period: tuple[int, ...]

    @property
    def irreducible(self) -> bool:
        return len(self.classes) == 1 and not self.transient


def _class_period(adj: np.ndarray, members: list[int]) -> int:
    # BFS levels from one root; the period is the gcd of level[u] + 1 - level[v]
    # over all edges u -> v inside the class.
    inside = set(members)
    level = {members[0]: 0}
    frontier = [members[0]]
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.flatnonzero(adj[u]):
                v = int(v)
                if v in inside and v not in level:
                    level[v] = level[u] + 1
                    nxt.append(v)
        frontier = nxt
    diffs = [level[u] + 1 - level[int(v)] for u in members for v in np.flatnonzero(adj[u])
             if int(v) in inside]
    return reduce(math.gcd, (abs(x) for x in diffs), 0) or 1


def ergodic_decomposition(trans) -> ErgodicDecomposition:
    """Closed communicating classes, transient states and class periods."""
    trans = check_stochastic(trans)
    adj = trans > 0
    n_comp, labels = connected_components(adj.astype(np.int8), directed=True, connection="strong")
    classes, transient, periods = [], [], []
    for c in range(n_comp):
        members = [int(i) for i in np.flatnonzero(labels == c)]
        leaves = adj[members][:, labels != c].any()
        if leaves:
            transient.extend(members)
        else:
            classes.append(tuple(members))
            periods.append(_class_period(adj, members))
    order = np.argsort([c[0] for c in classes])
    return ErgodicDecomposition(
        classes=tuple(classes[i] for i in order),
        transient=tuple(sorted(transient)),
        period=tuple(periods[i] for i in order),
    )


def check_assumptions_F(spec: ModelSpec, theta_star=None, rng=0, samples: int = 100_000,
                        neighborhood: float = 0.01) -> AssumptionReport:
    """Irreducibility (exact), integrability proxies and continuity probes."""
    model: FiniteHMM = spec.payload
    theta_star = spec.true_theta if theta_star is None else spec.box.check(theta_star)
    gen = as_generator(rng)
    report = AssumptionReport()

    decomp = ergodic_decomposition(model.trans(theta_star))
    report.add("F1", "pass" if decomp.irreducible else "fail", len(decomp.classes),
               f"classes={decomp.classes} transient={decomp.transient}")

    _, y = model.simulate(theta_star, Init.stationary(), samples - 1, gen)
    log_g_star = model.log_emissions(theta_star, y)
    status, value = "pass", 0.0
    for x in range(model.n_states):
        s, v = integrability_proxy(np.abs(log_g_star[:, x]))
        if s == "fail" or (s == "indeterminate" and status == "pass"):
            status = s
        value = max(value, v)
    report.add("F2", status, value, "Monte-Carlo proxy for E|log g(x, Y0)|")

    span = spec.box.upper - spec.box.lower
    sup_plus = np.full(log_g_star.shape, -np.inf)
    for _ in range(16):
        theta = np.clip(theta_star + neighborhood * span * gen.uniform(-1, 1, spec.box.dims),
                        spec.box.lower, spec.box.upper)
        sup_plus = np.maximum(sup_plus, model.log_emissions(theta, y))
    status, value = "pass", 0.0
    for x in range(model.n_states):
        s, v = integrability_proxy(np.maximum(sup_plus[:, x], 0.0))
        if s != "pass" and status == "pass":
            status = s
        value = max(value, v)
    report.add("F3", status, value, "Monte-Carlo proxy, sampled neighborhood sup")

    ys = y[: min(200, y.size)]
    s1, w1 = continuity_probe(lambda t: model.trans(t).ravel(), spec.box, gen)
    s2, w2 = continuity_probe(lambda t: np.exp(model.log_emissions(t, ys)).ravel(), spec.box, gen)
    report.add("F4-matrix-continuity", s1, w1, "finite-difference probe of theta -> Q_theta")
    report.add("F4-emission-continuity", s2, w2, "finite-difference probe of theta -> g_theta")
    return report


# -- the periodic counterexample -------------------------------------------------

REMARK13_TRANS = np.array([[0.0, 1.0], [1.0, 0.0]])


def remark13_model() -> ModelSpec:
    """Two-state alternating chain with symmetric binary emissions.

    The 1-based labels 1, 2 map to internal states and symbols 0, 1.
    """

    def probs(theta):
        t = float(theta[0])
        return np.array([[t, 1.0 - t], [1.0 - t, t]])

    payload = FiniteHMM(2, lambda theta: REMARK13_TRANS, CategoricalEmission(probs))
    box = ParameterBox([0.5], [0.9])
    return ModelSpec("finite", payload, box, np.array([0.7]), name="remark13")


def remark13_loglik_closed_form(theta: float, y) -> float:
    """log p^{delta_1}(y_0^{2n}) written out for the alternating chain.

    ``y`` uses internal symbols 0/1 (1-based symbols 1/2).
    """
    y = np.asarray(y)
    even, odd = y[0::2], y[1::2]
    lt, l1t = math.log(theta), math.log(1.0 - theta)
    return float(np.sum(np.where(even == 0, lt, l1t)) + np.sum(np.where(odd == 1, lt, l1t)))


def remark13_limit(theta: float, theta_star: float, x0: int) -> float:
    """Almost-sure limit of the normalized log-likelihood under nu = delta_1.

    ``x0`` is the true initial state in 1-based labels {1, 2}.
    """
    if x0 == 1:
        return theta_star * math.log(theta) + (1.0 - theta_star) * math.log(1.0 - theta)
    if x0 == 2:
        return (1.0 - theta_star) * math.log(theta) + theta_star * math.log(1.0 - theta)
    raise ValueError("x0 must be 1 or 2")


# -- common builders -------------------------------------------------------------

def gaussian_2state(trans=((0.9, 0.1), (0.1, 0.9)), sd: float = 1.0,
                    theta_star=(0.0, 2.0), lower=(-1.0, -1.0), upper=(3.0, 3.0)) -> ModelSpec:
    """Two-state chain with N(mu_x, sd^2) emissions; theta = (mu_0, mu_1).

    The transition matrix is fixed; if it is symmetric under relabelling the
    equivalence class of theta contains the swapped means.
    """
    trans = check_stochastic(np.array(trans, dtype=float))
    sds = np.full(2, float(sd))
    payload = FiniteHMM(2, lambda theta: trans,
                        GaussianEmission(lambda theta: np.asarray(theta, dtype=float), lambda theta: sds))
    swapped = trans[::-1, ::-1]
    perms = ((1, 0),) if np.allclose(swapped, trans) else ()
    box = ParameterBox(lower, upper, "label-permutation" if perms else "identity", perms)
    return ModelSpec("finite", payload, box, np.array(theta_star, dtype=float), name="gaussian_2state")


def categorical_hmm(trans, emit) -> FiniteHMM:
    """Parameter-free finite HMM with constant matrices (test and oracle helper)."""
    trans = check_stochastic(trans)
    emit = np.asarray(emit, dtype=float)
    return FiniteHMM(trans.shape[0], lambda theta: trans, CategoricalEmission(lambda theta: emit))
