"""Objective functions: random-feature draws from a Matérn GP prior, classic
benchmarks, and a seeded noisy observation channel.

All objectives are maximized over the unit cube. Benchmarks are rescaled from
their native boxes and sign-flipped.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Union

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .errors import ConfigError, InputError
from .gp import Hyperparams
from .reparam import normal_stream

MATERN_NU = 2.5
_BOUND_TOL = 1e-12


def known_prior_hyperparams(d: int, noise_variance: float = 1e-3) -> Hyperparams:
    """GP hyperparameters matching the synthetic task prior in ``d`` dimensions.

    The spectral scale ``(16/d) I`` corresponds to a Matérn-5/2 kernel with
    lengthscale ``sqrt(d)/4`` and unit signal variance.
    """
    return Hyperparams(
        lengthscales=np.full(d, math.sqrt(d) / 4.0),
        signal_variance=1.0,
        noise_variance=noise_variance,
        mean_constant=0.0,
    )


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SyntheticTask:
    """f(x) = amplitude * sum_i w_i cos(omega_i . x + b_i)."""

    frequencies: np.ndarray
    phases: np.ndarray
    weights: np.ndarray
    amplitude: float = 1.0
    true_max: float = float("nan")
    argmax_estimate: np.ndarray = field(default_factory=lambda: np.zeros(0))
    seed: int = 0
    nu: float = MATERN_NU

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.frequencies, dtype=float))
        b = np.asarray(self.phases, dtype=float).reshape(-1)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if not (W.shape[0] == b.shape[0] == w.shape[0]):
            raise InputError("frequencies, phases and weights disagree on the basis size")
        object.__setattr__(self, "frequencies", _readonly(W))
        object.__setattr__(self, "phases", _readonly(b))
        object.__setattr__(self, "weights", _readonly(w))
        object.__setattr__(self, "argmax_estimate", _readonly(self.argmax_estimate))

    @property
    def dim(self) -> int:
        return self.frequencies.shape[1]

    @property
    def n_basis(self) -> int:
        return self.frequencies.shape[0]

    def features(self, X) -> np.ndarray:
        """Random features cos(omega . x + b), shape (n, n_basis)."""
        return np.cos(np.atleast_2d(X) @ self.frequencies.T + self.phases)

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.amplitude * (self.features(X) @ self.weights)

    def value_and_grad(self, x):
        x = np.asarray(x, dtype=float)
        arg = self.frequencies @ x + self.phases
        val = self.amplitude * float(self.weights @ np.cos(arg))
        grad = -self.amplitude * ((self.weights * np.sin(arg)) @ self.frequencies)
        return val, grad

    def to_json(self) -> str:
        return json.dumps(
            {
                "dim": self.dim,
                "n_basis": self.n_basis,
                "seed": self.seed,
                "nu": self.nu,
                "amplitude": self.amplitude,
                "true_max": self.true_max,
                "argmax_estimate": self.argmax_estimate.tolist(),
                "frequencies": self.frequencies.tolist(),
                "phases": self.phases.tolist(),
                "weights": self.weights.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SyntheticTask":
        obj = json.loads(text)
        return cls(
            frequencies=np.asarray(obj["frequencies"], dtype=float).reshape(obj["n_basis"], obj["dim"]),
            phases=obj["phases"],
            weights=obj["weights"],
            amplitude=obj["amplitude"],
            true_max=obj["true_max"],
            argmax_estimate=obj["argmax_estimate"],
            seed=obj["seed"],
            nu=obj["nu"],
        )


def _spectral_draws(d: int, n: int, seed: int, nu: float) -> np.ndarray:
    """Multivariate-t(2*nu) frequencies with scale (16/d) I; nu=inf gives Gaussian."""
    scale = math.sqrt(16.0 / d)
    gen = np.random.default_rng(np.random.SeedSequence([seed, d, 1]))
    g = gen.standard_normal((n, d))
    if math.isinf(nu):
        return scale * g
    dof = 2.0 * nu
    chi2 = gen.chisquare(dof, size=(n, 1))
    return scale * g * np.sqrt(dof / chi2)


def estimate_task_max(task: SyntheticTask, n_candidates: int = 4096, n_refine: int = 32, seed: int = 0):
    """Score a Sobol design, then polish the best candidates with L-BFGS-B.

    Returns ``(value, argmax)``; the value is at least the best probed design point.
    """
    d = task.dim
    sob = qmc.Sobol(d, scramble=True, seed=np.random.default_rng([seed, d, 2]))
    cand = sob.random(n_candidates)
    vals = np.concatenate([task(chunk) for chunk in np.array_split(cand, max(1, n_candidates // 256))])
    order = np.argsort(-vals, kind="stable")[: max(1, n_refine)]
    best_v, best_x = float(vals[order[0]]), cand[order[0]].copy()

    def neg(x):
        v, g = task.value_and_grad(x)
        return -v, -g

    for i in order:
        res = minimize(neg, cand[i], jac=True, method="L-BFGS-B", bounds=[(0.0, 1.0)] * d)
        if np.isfinite(res.fun) and -res.fun > best_v:
            best_v, best_x = float(-res.fun), np.clip(res.x, 0.0, 1.0)
    return best_v, best_x


def sample_matern_task(
    d: int,
    n_basis: int = 2**14,
    seed: int = 0,
    nu: float = MATERN_NU,
    estimate_max: bool = True,
    n_starts: int = 4096,
) -> SyntheticTask:
    """Approximate draw from a zero-mean Matérn GP prior on [0, 1]^d via random features."""
    if d < 1 or n_basis < 1:
        raise ConfigError("need d >= 1 and n_basis >= 1")
    freqs = _spectral_draws(d, n_basis, seed, nu)
    gen = np.random.default_rng(np.random.SeedSequence([seed, d, 3]))
    phases = gen.uniform(0.0, 2.0 * math.pi, n_basis)
    weights = gen.standard_normal(n_basis) * math.sqrt(2.0 / n_basis)
    task = SyntheticTask(freqs, phases, weights, 1.0, seed=seed, nu=nu)
    if not estimate_max:
        return task
    value, x = estimate_task_max(task, n_candidates=n_starts, seed=seed)
    return SyntheticTask(freqs, phases, weights, 1.0, value, x, seed, nu)


def _check_unit(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != d:
        raise InputError(f"expected {d} coordinates, got shape {x.shape}")
    if np.any(x < -_BOUND_TOL) or np.any(x > 1.0 + _BOUND_TOL) or not np.all(np.isfinite(x)):
        raise InputError("input outside the unit cube")
    return np.clip(x, 0.0, 1.0)


def evaluate_task(task: SyntheticTask, x) -> float:
    """f(x) for a single point in the unit cube."""
    x = _check_unit(x, task.dim)
    if x.ndim != 1:
        raise InputError("evaluate_task takes one point; call the task directly for batches")
    return float(task(x)[0])


# ---------------------------------------------------------------- benchmarks


@lru_cache(maxsize=1)
def _benchmark_table() -> dict:
    text = resources.files("qacq").joinpath("data/benchmarks.json").read_text()
    return json.loads(text)


BENCHMARKS = ("branin", "hartmann3", "hartmann6", "levy")


@dataclass(frozen=True)
class Benchmark:
    name: str
    dim: int

    def __post_init__(self):
        if self.name not in BENCHMARKS:
            raise ConfigError(f"unknown benchmark {self.name!r}")
        fixed = _benchmark_table()[self.name]["dim"]
        if fixed is not None and self.dim != fixed:
            raise ConfigError(f"{self.name} is {fixed}-dimensional, got dim={self.dim}")
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")

    @property
    def true_max(self) -> float:
        return -float(_benchmark_table()[self.name]["minimum"])

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.array([benchmark(self.name, x) for x in X])


def make_benchmark(name: str, dim: int | None = None) -> Benchmark:
    fixed = _benchmark_table().get(name, {}).get("dim") if name in BENCHMARKS else None
    return Benchmark(name, fixed if fixed is not None else (dim or 2))


def benchmark_info(name: str) -> dict:
    if name not in BENCHMARKS:
        raise ConfigError(f"unknown benchmark {name!r}")
    return dict(_benchmark_table()[name])


def native_coordinates(name: str, x) -> np.ndarray:
    """Map a unit-cube point to the benchmark's canonical domain."""
    info = benchmark_info(name)
    x = np.asarray(x, dtype=float)
    if name == "levy":
        return info["lower_each"] + x * (info["upper_each"] - info["lower_each"])
    lo, hi = np.asarray(info["lower"]), np.asarray(info["upper"])
    return lo + x * (hi - lo)


def canonical_value(name: str, z) -> float:
    """Benchmark in its native coordinates and native (minimization) sign."""
    info = benchmark_info(name)
    z = np.asarray(z, dtype=float)
    if name == "branin":
        x1, x2 = z
        return float(
            info["a"] * (x2 - info["b"] * x1**2 + info["c"] * x1 - info["r"]) ** 2
            + info["s"] * (1.0 - info["t"]) * math.cos(x1)
            + info["s"]
        )
    if name in ("hartmann3", "hartmann6"):
        A, P, al = np.asarray(info["A"]), np.asarray(info["P"]), np.asarray(info["alpha"])
        inner = np.sum(A * (z - P) ** 2, axis=1)
        return float(-np.sum(al * np.exp(-inner)))
    w = 1.0 + (z - 1.0) / 4.0
    head = math.sin(math.pi * w[0]) ** 2
    mid = np.sum((w[:-1] - 1.0) ** 2 * (1.0 + 10.0 * np.sin(math.pi * w[:-1] + 1.0) ** 2))
    tail = (w[-1] - 1.0) ** 2 * (1.0 + math.sin(2.0 * math.pi * w[-1]) ** 2)
    return float(head + mid + tail)


def benchmark(name: str, x) -> float:
    """Sign-flipped benchmark value at a unit-cube point (so larger is better)."""
    info = benchmark_info(name)
    x = np.asarray(x, dtype=float)
    d = info["dim"] if info["dim"] is not None else x.shape[-1]
    x = _check_unit(x, d)
    return -canonical_value(name, native_coordinates(name, x))


# ---------------------------------------------------------------- observation


@dataclass(frozen=True)
class ObservationChannel:
    """Gaussian measurement noise; the draw for call ``index`` is keyed on (seed, index)."""

    noise_variance: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not self.noise_variance >= 0.0:
            raise ConfigError("noise_variance must be non-negative")

    def noise(self, index: int, size: int = 1) -> np.ndarray:
        if self.noise_variance == 0.0:
            return np.zeros(size)
        eps = normal_stream((size,), (self.seed, 7, index))
        return math.sqrt(self.noise_variance) * eps


Objective = Union[SyntheticTask, Benchmark]


def observe(objective: Objective, x, channel: ObservationChannel, index: int = 0) -> float:
    """Noisy observation of a single unit-cube point."""
    x = _check_unit(x, objective.dim)
    return float(objective(x)[0] + channel.noise(index)[0])


def observe_batch(objective: Objective, X, channel: ObservationChannel, start_index: int) -> np.ndarray:
    """Observations of each row of X using consecutive indices from ``start_index``."""
    X = _check_unit(np.atleast_2d(X), objective.dim)
    return np.array(
        [float(objective(x)[0] + channel.noise(start_index + i)[0]) for i, x in enumerate(X)]
    )
