"""Independent oracles: finite differences, exhaustive enumeration on grids,
closed forms, and Monte Carlo cross-checks.

Each check returns an :class:`OracleReport` and is deterministic given its seed.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import norm

from .acquisitions import (
    AcquisitionSpec,
    evaluate,
    incremental_ei_paths,
    marginal_ei_closed_form,
    normalization_offset,
    pointwise_utility,
)
from .harness import sobol_points
from .gp import Dataset, GPModel, Hyperparams, matern52_cross_covariance
from .reparam import draw_base_samples, stable_cholesky
from .tasks import known_prior_hyperparams, sample_matern_task


@dataclass(frozen=True)
class OracleReport:
    name: str
    n_cases: int
    metric: float
    tolerance: float
    passed: bool
    seed: int
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- helpers


def finite_difference_gradient(f: Callable[[np.ndarray], float], X, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of a matrix, coordinate by coordinate."""
    if not h > 0.0:
        raise ValueError("h must be positive")
    X = np.asarray(X, dtype=float)
    g = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        Xp = X.copy()
        Xm = X.copy()
        Xp[idx] += h
        Xm[idx] -= h
        g[idx] = (f(Xp) - f(Xm)) / (2.0 * h)
    return g


def relative_error(g, ref) -> float:
    """max |g - ref| scaled by max |ref| (floored at 1e-6)."""
    g, ref = np.asarray(g), np.asarray(ref)
    return float(np.max(np.abs(g - ref)) / max(float(np.max(np.abs(ref))), 1e-6))


def random_model(gen: np.random.Generator, d: int, n: int, noise: float = 1e-3) -> GPModel:
    """GP posterior with random data and hyperparameters, for oracle cases."""
    X = gen.random((n, d))
    hp = Hyperparams(
        lengthscales=gen.uniform(0.15, 0.6, d),
        signal_variance=float(gen.uniform(0.5, 2.0)),
        noise_variance=noise,
        mean_constant=float(gen.normal(0.0, 0.3)),
    )
    y = hp.mean_constant + math.sqrt(hp.signal_variance) * gen.standard_normal(n)
    return GPModel(Dataset(X, y), hp)


def sobol_grid(n: int, d: int, seed: int) -> np.ndarray:
    return sobol_points(n, d, seed)


def sample_grid_paths(model: GPModel, grid, n_paths: int, seed: int) -> np.ndarray:
    """Joint posterior draws of f over the grid, shape (n_paths, g)."""
    mean, cov = model.batch_moments(np.atleast_2d(grid))
    L, _ = stable_cholesky(0.5 * (cov + cov.T))
    z = draw_base_samples(n_paths, L.shape[0], "deterministic", seed).z
    return mean + z @ L.T


# ---------------------------------------------------------------- gradient check


def gradient_check(kind: str, n_configs: int = 50, seed: int = 0, tau: float = 0.05, m: int = 64, h: float = 1e-6, tol: float = 1e-3) -> OracleReport:
    """Sample-path gradient vs central differences of the shared-sample MC value."""
    gen = np.random.default_rng([seed, 1])
    worst = 0.0
    for _ in range(n_configs):
        d = int(gen.integers(1, 4))
        q = int(gen.integers(1, 4))
        model = random_model(gen, d, int(gen.integers(2, 9)))
        disc = gen.random((6, d)) if kind in ("ES", "KG") else None
        spec = AcquisitionSpec(kind=kind, tau=tau, discretization=disc, beta=float(gen.uniform(0.5, 4.0)))
        z = draw_base_samples(m, q, "deterministic", int(gen.integers(1 << 30))).z
        X = gen.random((q, d))
        g = evaluate(spec, model, X, z, grad=True).grad
        fd = finite_difference_gradient(lambda Y: float(evaluate(spec, model, Y, z).values), X, h)
        worst = max(worst, relative_error(g, fd))
    return OracleReport(f"gradient_{kind.lower()}", n_configs, worst, tol, worst < tol, seed)


# ---------------------------------------------------------------- q = 1 closed forms


def _analytic_ei_stderr(x, model: GPModel, alpha: float, m: int) -> float:
    """Standard error of the m-sample mean of relu(y - alpha), y ~ N(mu, sigma^2)."""
    mean, var = model.marginals(x)
    sd = math.sqrt(var[0])
    u = (mean[0] - alpha) / sd
    second = sd * sd * ((u * u + 1.0) * norm.cdf(u) + u * norm.pdf(u))
    first = marginal_ei_closed_form(x, model, alpha)
    return math.sqrt(max(second - first * first, 0.0) / m)


def ei_consistency(n_cases: int = 100, m: int = 2**14, seed: int = 0, rel_se_tol: float = 0.02) -> OracleReport:
    """MC EI at a single point vs the closed form, within 4 standard errors.

    Also requires the standard error to be below ``rel_se_tol`` of the
    analytic value whenever that value exceeds 0.05.
    """
    gen = np.random.default_rng([seed, 2])
    z = draw_base_samples(m, 1, "deterministic", seed).z
    worst_z, worst_rel_se, fails = 0.0, 0.0, 0
    for _ in range(n_cases):
        d = int(gen.integers(1, 4))
        model = random_model(gen, d, int(gen.integers(1, 7)))
        x = gen.random((1, d))
        spec = AcquisitionSpec("EI").resolve(model)
        est = evaluate(spec, model, x, z)
        exact = marginal_ei_closed_form(x, model, spec.alpha)
        se = float(est.stderr)
        if se == 0.0:
            # No sample improved on alpha; use the estimator's exact standard error.
            se = _analytic_ei_stderr(x, model, spec.alpha, m)
        dev = abs(float(est.values) - exact)
        ok = dev <= 4.0 * se
        worst_z = max(worst_z, dev / se if se > 0.0 else 0.0)
        if exact > 0.05:
            worst_rel_se = max(worst_rel_se, se / exact)
            ok = ok and se < rel_se_tol * exact
        fails += not ok
    return OracleReport(
        "ei_q1_consistency", n_cases, float(fails), 0.0, fails == 0, seed,
        {"max_abs_z": worst_z, "max_rel_se": worst_rel_se},
    )


def ucb_identity(n_cases: int = 20, betas=(1.0, 2.0, 4.0), m: int = 2**16, seed: int = 0) -> OracleReport:
    """Single-point MC UCB vs mu + sqrt(beta) sigma, within 4 standard errors."""
    gen = np.random.default_rng([seed, 3])
    z = draw_base_samples(m, 1, "deterministic", seed).z
    worst, fails, n = 0.0, 0, 0
    for _ in range(n_cases):
        mu = float(gen.normal(0.0, 1.0))
        sigma = float(gen.uniform(0.05, 2.0))
        # A prior-only model has exactly these marginal moments at any point.
        model = GPModel(Dataset.empty(1), Hyperparams(np.array([0.3]), sigma**2, 1e-3, mu))
        for beta in betas:
            est = evaluate(AcquisitionSpec("UCB", beta=beta), model, np.array([[0.5]]), z)
            dev = abs(float(est.values) - (mu + math.sqrt(beta) * sigma))
            worst = max(worst, dev / float(est.stderr))
            fails += dev > 4.0 * float(est.stderr)
            n += 1
    return OracleReport("ucb_identity", n, worst, 4.0, fails == 0, seed, {"failures": fails})


# ---------------------------------------------------------------- set functions


def _subset_max(u: np.ndarray, floor: np.ndarray) -> np.ndarray:
    """Max of u over every subset (bitmask index); empty set maps to ``floor``. u is (k, g)."""
    k, g = u.shape
    out = np.empty((1 << g, k))
    out[0] = floor
    for mask in range(1, 1 << g):
        low = mask & -mask
        j = low.bit_length() - 1
        rest = mask ^ low
        out[mask] = u[:, j] if rest == 0 else np.maximum(out[rest], u[:, j])
    return out


def _nested_triples(g: int):
    """All (A, B, v) with A subset of B, v outside B, as bitmask arrays."""
    A, B, V = [], [], []
    for b in range(1 << g):
        sub = b
        while True:
            for v in range(g):
                if not b >> v & 1:
                    A.append(sub)
                    B.append(b)
                    V.append(v)
            if sub == 0:
                break
            sub = (sub - 1) & b
    return np.array(A), np.array(B), np.array(V)


def check_submodularity_bruteforce(kind: str, n_draws: int, grid, model: GPModel, seed: int = 0, beta: float = 2.0, tau: float = 0.05) -> OracleReport:
    """Exhaustive diminishing-returns and max-growth checks on a finite ground set.

    For each sampled path the set function is max of the utility over the set,
    with the empty set valued at the acquisition's normalization offset. Both
    inequalities are checked path by path and for the MC average.
    """
    grid = np.atleast_2d(grid)
    g = grid.shape[0]
    if g > 12:
        raise ValueError("grid too large for exhaustive enumeration")
    spec = AcquisitionSpec(kind, beta=beta, tau=tau).resolve(model)
    paths = sample_grid_paths(model, grid, n_draws, seed)
    mean, _ = model.marginals(grid)
    u = pointwise_utility(spec, paths, mean)
    v_min = normalization_offset(spec, model, grid).v_min
    F = _subset_max(u, np.full(n_draws, v_min))
    A, B, V = _nested_triples(g)
    bit = 1 << V
    gain_a = F[A | bit] - F[A]
    gain_b = F[B | bit] - F[B]
    path_viol = int(np.sum(gain_a < gain_b))
    Fm = F.mean(axis=1)
    mean_viol = int(np.sum(Fm[A | bit] - Fm[A] < Fm[B | bit] - Fm[B] - 1e-12))
    # max-growth: F(S + v) - F(S) == relu(u_v - F(S)) exactly
    S = np.arange(1 << g)
    growth_viol = 0
    for v in range(g):
        outside = S[(S >> v & 1) == 0]
        lhs = F[outside | (1 << v)] - F[outside]
        rhs = np.maximum(u[:, v][None, :] - F[outside], 0.0)
        growth_viol += int(np.sum(lhs != rhs))
    total = path_viol + mean_viol + growth_viol
    return OracleReport(
        f"submodularity_{kind.lower()}", len(A) * n_draws, float(total), 0.0, total == 0, seed,
        {"path_violations": path_viol, "mean_violations": mean_viol, "growth_violations": growth_viol, "v_min": v_min},
    )


def greedy_vs_exhaustive(values: np.ndarray, q: int) -> tuple[float, float, tuple]:
    """Greedy and optimal value of F(S) = mean_k max_{i in S} values[k, i] over |S| = q.

    ``values`` must be normalized (non-negative) so the empty set is worth 0.
    Returns ``(greedy, optimum, greedy_set)``.
    """
    values = np.asarray(values, dtype=float)
    g = values.shape[1]
    chosen: list[int] = []
    cur = np.zeros(values.shape[0])
    for _ in range(q):
        gains = np.maximum(values, cur[:, None]).mean(axis=0)
        gains[chosen] = -np.inf
        j = int(np.argmax(gains))
        chosen.append(j)
        cur = np.maximum(cur, values[:, j])
    greedy = float(cur.mean())
    best = max(float(values[:, list(S)].max(axis=1).mean()) for S in itertools.combinations(range(g), q))
    return greedy, best, tuple(chosen)


def greedy_guarantee(n_seeds: int = 20, qs=(2, 3), grid_size: int = 20, n_paths: int = 256, seed: int = 0) -> OracleReport:
    """Greedy / exhaustive ratio for MC EI on random posteriors over Sobol grids."""
    bound = 1.0 - 1.0 / math.e
    worst = 1.0
    n = 0
    for s in range(n_seeds):
        gen = np.random.default_rng([seed, 4, s])
        d = int(gen.integers(1, 4))
        model = random_model(gen, d, int(gen.integers(2, 8)))
        grid = sobol_grid(grid_size, d, seed * 1000 + s)
        paths = sample_grid_paths(model, grid, n_paths, seed * 1000 + s)
        u = np.maximum(paths - model.best_observed, 0.0)
        for q in qs:
            greedy, best = greedy_vs_exhaustive(u, q)[:2]
            worst = min(worst, greedy / best if best > 0.0 else 1.0)
            n += 1
    return OracleReport("greedy_guarantee", n, worst, bound, worst >= bound - 1e-9, seed)


# ---------------------------------------------------------------- joint vs incremental


def joint_incremental_equiv(model: GPModel, X, m: int = 2**16, seed: int = 0, alpha: Optional[float] = None) -> tuple[float, float, float]:
    """Joint MC q-EI and the fantasy-averaged sum of closed-form EI at fixed X.

    Independent base samples drive the two estimators. Returns
    ``(joint, incremental, combined_se)``.
    """
    X = np.atleast_2d(X)
    q = X.shape[0]
    spec = AcquisitionSpec("EI", alpha=alpha).resolve(model)
    z1 = draw_base_samples(m, q, "deterministic", 2 * seed).z
    z2 = draw_base_samples(m, q, "deterministic", 2 * seed + 1).z
    joint = evaluate(spec, model, X, z1)
    inc = incremental_ei_paths(X, model, z2, spec.alpha)
    se = math.hypot(float(joint.stderr), float(inc.std(ddof=1) / math.sqrt(m)))
    return float(joint.values), float(inc.mean()), se


def joint_incremental_check(n_seeds: int = 10, qs=(2, 3), m: int = 2**16, seed: int = 0) -> OracleReport:
    worst = 0.0
    n = 0
    for s in range(n_seeds):
        gen = np.random.default_rng([seed, 5, s])
        d = int(gen.integers(1, 4))
        model = random_model(gen, d, int(gen.integers(2, 8)))
        for q in qs:
            X = gen.random((q, d))
            joint, inc, se = joint_incremental_equiv(model, X, m, seed * 1000 + s)
            worst = max(worst, abs(joint - inc) / se)
            n += 1
    return OracleReport("joint_incremental", n, worst, 4.0, worst <= 4.0, seed)


# ---------------------------------------------------------------- synthetic tasks


def rff_fidelity(n_tasks: int = 64, grid_size: int = 32, n_basis: int = 2**14, seed: int = 0, tol: float = 0.05) -> OracleReport:
    """Random-feature covariance of 1-d synthetic tasks vs the Matérn-5/2 kernel.

    For each task the covariance over its random weights is
    ``(2 / n_basis) Phi Phi^T``; these are averaged over ``n_tasks`` draws of
    frequencies and phases. The plain sample covariance of the 64 function
    draws is reported alongside for information.
    """
    grid = np.linspace(0.0, 1.0, grid_size)[:, None]
    K = matern52_cross_covariance(grid, grid, known_prior_hyperparams(1))
    C = np.zeros_like(K)
    F = np.empty((n_tasks, grid_size))
    for t in range(n_tasks):
        task = sample_matern_task(1, n_basis, seed * 10_000 + t, estimate_max=False)
        Phi = task.features(grid)
        C += (2.0 / task.n_basis) * task.amplitude**2 * (Phi @ Phi.T)
        F[t] = task(grid)
    C /= n_tasks
    dev = float(np.max(np.abs(C - K)))
    sample_dev = float(np.max(np.abs(F.T @ F / n_tasks - K)))
    return OracleReport("rff_fidelity", n_tasks, dev, tol, dev < tol, seed, {"sample_covariance_max_dev": sample_dev})


# ---------------------------------------------------------------- battery


def submodularity_battery(seed: int = 0, grid_size: int = 8, n_draws: int = 32, kinds=("EI", "PI", "UCB")) -> list[OracleReport]:
    gen = np.random.default_rng([seed, 6])
    model = random_model(gen, 2, 5)
    grid = sobol_grid(grid_size, 2, seed)
    return [check_submodularity_bruteforce(k, n_draws, grid, model, seed) for k in kinds]


CHECKS: dict[str, Callable[[int], list[OracleReport]]] = {
    "gradient": lambda s: [gradient_check(k, 50, s) for k in ("EI", "SR", "UCB", "PI", "ES", "KG")],
    "ei_q1": lambda s: [ei_consistency(seed=s)],
    "ucb_identity": lambda s: [ucb_identity(seed=s)],
    "submodularity": lambda s: submodularity_battery(s),
    "greedy_guarantee": lambda s: [greedy_guarantee(seed=s)],
    "joint_incremental": lambda s: [joint_incremental_check(seed=s)],
    "rff_fidelity": lambda s: [rff_fidelity(seed=s)],
}


def run_battery(names: Optional[list[str]] = None, seed: int = 0) -> list[OracleReport]:
    """Run the named checks (all by default); reports are ordered by check name."""
    names = sorted(CHECKS) if not names else sorted(names)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown check(s): {', '.join(unknown)}")
    out: list[OracleReport] = []
    for name in names:
        out.extend(CHECKS[name](seed))
    return out
