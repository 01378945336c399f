"""Shared vocabulary for parameterized hidden Markov models.

Each model family (finite, linear-Gaussian, nonlinear ARCH) supplies a payload
object exposing ``simulate``, ``log_g`` and ``log_q``; the functions here
validate parameters against the box and dispatch.  Zero densities are encoded
as ``-inf`` and all downstream arithmetic stays in the log domain.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import ModelError
from .rng import as_generator

FAMILIES = ("finite", "linear-gaussian", "nonlinear-arch")
EQUIVALENCES = ("identity", "label-permutation", "custom-finite-orbit")


@dataclass(frozen=True, eq=False)
class ParameterBox:
    """Compact box of parameters together with its equivalence relation.

    ``permutations`` lists coordinate permutations generating the orbit when
    ``equivalence == "label-permutation"``; ``orbit_fn`` maps a parameter to
    its finite orbit when ``equivalence == "custom-finite-orbit"``.
    """

    lower: np.ndarray
    upper: np.ndarray
    equivalence: str = "identity"
    permutations: tuple[tuple[int, ...], ...] = ()
    orbit_fn: Callable[[np.ndarray], Sequence[np.ndarray]] | None = None

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ModelError("box bounds must be vectors of equal length")
        if not np.all(lo < hi):
            raise ModelError("box requires lower[i] < upper[i] for every coordinate")
        if self.equivalence not in EQUIVALENCES:
            raise ModelError(f"unknown equivalence {self.equivalence!r}")
        if self.equivalence == "custom-finite-orbit" and self.orbit_fn is None:
            raise ModelError("custom-finite-orbit equivalence needs orbit_fn")
        for perm in self.permutations:
            if sorted(perm) != list(range(lo.size)):
                raise ModelError(f"{perm} is not a permutation of the coordinates")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dims(self) -> int:
        return self.lower.size

    def contains(self, theta, atol: float = 0.0) -> bool:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        return theta.shape == self.lower.shape and bool(
            np.all(theta >= self.lower - atol) and np.all(theta <= self.upper + atol)
        )

    def check(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != self.lower.shape:
            raise ModelError(f"theta has {theta.size} coordinates, box has {self.dims}")
        bad = np.flatnonzero((theta < self.lower) | (theta > self.upper))
        if bad.size:
            i = int(bad[0])
            raise ModelError(
                f"theta[{i}]={theta[i]} outside [{self.lower[i]}, {self.upper[i]}]"
            )
        return theta

    def orbit(self, theta) -> list[np.ndarray]:
        """Enumerate the equivalence class of ``theta`` restricted to the box."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if self.equivalence == "identity":
            members = [theta]
        elif self.equivalence == "label-permutation":
            members = [theta] + [theta[list(p)] for p in self.permutations]
        else:
            members = [np.atleast_1d(np.asarray(m, dtype=float)) for m in self.orbit_fn(theta)]
            if not members:
                raise ModelError("orbit_fn returned an empty orbit")
        out = []
        for m in members:
            if self.contains(m, atol=1e-12) and not any(np.array_equal(m, o) for o in out):
                out.append(m)
        return out or [theta]

    def grid(self, per_dim: int) -> np.ndarray:
        """Lexicographically ordered tensor grid, shape (per_dim**dims, dims)."""
        axes = [np.linspace(lo, hi, per_dim) for lo, hi in zip(self.lower, self.upper)]
        return np.array(list(itertools.product(*axes)), dtype=float)


@dataclass(frozen=True, eq=False)
class Init:
    """Initial state measure.

    kind is one of ``point``, ``stationary``, ``weights`` (finite chains; the
    weights need not sum to one), ``gaussian`` (continuous state) or
    ``lambda``, the family's reference measure used for improper likelihoods.
    """

    kind: str
    point: Any = None
    weights: np.ndarray | None = None
    mean: np.ndarray | None = None
    cov: np.ndarray | None = None
    burn_in: int = 10_000

    @classmethod
    def point_mass(cls, x) -> "Init":
        return cls("point", point=x)

    @classmethod
    def stationary(cls, burn_in: int = 10_000) -> "Init":
        return cls("stationary", burn_in=burn_in)

    @classmethod
    def from_weights(cls, weights) -> "Init":
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0) or not np.any(w > 0):
            raise ModelError("initial weights must be non-negative and not all zero")
        return cls("weights", weights=w)

    @classmethod
    def improper(cls) -> "Init":
        return cls("lambda")

    @classmethod
    def gaussian(cls, mean, cov) -> "Init":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        return cls("gaussian", mean=mean, cov=cov)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    family: str
    payload: Any
    box: ParameterBox
    true_theta: np.ndarray
    name: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown family {self.family!r}")
        if getattr(self.payload, "family", self.family) != self.family:
            raise ModelError("payload does not belong to the declared family")
        object.__setattr__(self, "true_theta", self.box.check(self.true_theta))


def simulate(model: ModelSpec, theta, init: Init, n: int, rng):
    """Draw ``(states, observations)`` of length ``n + 1`` under ``theta``."""
    theta = model.box.check(theta)
    if n < 0:
        raise ModelError("horizon n must be non-negative")
    return model.payload.simulate(theta, init, int(n), as_generator(rng))


def simulate_observations(model: ModelSpec, theta, init: Init, n: int, replicates: int, rng):
    """Batch of observation paths, shape ``(replicates, n + 1, ...)``."""
    theta = model.box.check(theta)
    gen = as_generator(rng)
    batch = getattr(model.payload, "simulate_observations", None)
    if batch is not None:
        return batch(theta, init, int(n), int(replicates), gen)
    return np.stack([model.payload.simulate(theta, init, int(n), gen)[1] for _ in range(replicates)])


def log_g(model: ModelSpec, theta, x, y) -> float:
    """Log observation density w.r.t. the family's reference measure."""
    return model.payload.log_g(model.box.check(theta), x, y)


def log_q(model: ModelSpec, theta, x, x2) -> float:
    """Log density of the l-step transition kernel w.r.t. the family's lambda."""
    return model.payload.log_q(model.box.check(theta), x, x2)


def stationary_distribution(trans: np.ndarray) -> np.ndarray:
    """Solve pi Q = pi, sum(pi) = 1 by least squares."""
    trans = np.asarray(trans, dtype=float)
    d = trans.shape[0]
    lhs = np.vstack([trans.T - np.eye(d), np.ones((1, d))])
    rhs = np.zeros(d + 1)
    rhs[-1] = 1.0
    pi = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


# -- assumption reports ----------------------------------------------------

STATUSES = ("pass", "fail", "indeterminate")


@dataclass
class AssumptionItem:
    status: str
    value: float = float("nan")
    detail: str = ""


@dataclass
class AssumptionReport:
    items: dict[str, AssumptionItem] = field(default_factory=dict)

    def add(self, name: str, status: str, value: float = float("nan"), detail: str = ""):
        if status not in STATUSES:
            raise ValueError(status)
        self.items[name] = AssumptionItem(status, float(value), detail)

    def __getitem__(self, name: str) -> AssumptionItem:
        return self.items[name]

    def status(self, name: str) -> str:
        return self.items[name].status

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.items.items() if v.status == "fail"]

    @property
    def indeterminate(self) -> list[str]:
        return [k for k, v in self.items.items() if v.status == "indeterminate"]


def integrability_proxy(samples: np.ndarray, rel_tol: float = 0.01, batches: int = 50) -> tuple[str, float]:
    """Monte-Carlo finiteness proxy for E|Z| from (possibly correlated) samples of |Z|.

    Returns ``("fail", inf)`` when a sample is infinite.  Otherwise the result
    is ``"pass"`` when the running mean over the last doubling of the sample
    moved by less than ``rel_tol`` of its size plus three batch-means standard
    errors, and no single sample carries more than 1% of the total; it is
    ``"indeterminate"`` otherwise.
    """
    z = np.abs(np.asarray(samples, dtype=float))
    if not np.all(np.isfinite(z)):
        return "fail", float("inf")
    half = z.size // 2
    if half < batches:
        return "indeterminate", float("nan")
    full, first = z.mean(), z[:half].mean()
    usable = z[: z.size - z.size % batches].reshape(batches, -1).mean(axis=1)
    se = usable.std(ddof=1) / np.sqrt(batches)
    total = z.sum()
    dominated = total > 0 and z.max() > 0.01 * total
    stable = abs(full - first) <= rel_tol * abs(full) + 3.0 * se
    return ("pass" if stable and not dominated else "indeterminate"), float(full)


def continuity_probe(fn: Callable[[np.ndarray], np.ndarray], box: ParameterBox, gen,
                     n_points: int = 20, steps=(1e-2, 1e-4, 1e-6)) -> tuple[str, float]:
    """Finite-difference continuity check of ``fn`` across the box.

    At random interior points, moves along a random direction by each step
    (relative to the box span); the worst sup-norm change at the smallest
    step is returned.  A relative change above 1e-3 there is a failure.
    """
    gen = as_generator(gen)
    worst = 0.0
    span = box.upper - box.lower
    for _ in range(n_points):
        theta = box.lower + span * gen.uniform(0.05, 0.95, size=box.dims)
        direction = gen.normal(size=box.dims)
        direction /= np.linalg.norm(direction)
        base = np.asarray(fn(theta), dtype=float)
        scale = 1.0 + np.max(np.abs(base[np.isfinite(base)]), initial=0.0)
        h = min(steps)
        moved = np.asarray(fn(theta + h * span * direction), dtype=float)
        with np.errstate(invalid="ignore"):
            diff = np.abs(moved - base)
        diff = np.where(np.isnan(diff) & (moved == base), 0.0, diff)
        worst = max(worst, float(np.max(diff, initial=0.0)) / scale)
    return ("pass" if worst <= 1e-3 else "fail"), worst
