"""Monte Carlo acquisition functions and their sample-path gradients.

Every estimator draws ``y = mu + L z`` from the GP belief at the query set and
averages a utility over the rows. Gradients are formed per sample path by
chaining the utility's derivative through the reparameterization, the
Cholesky factorization, and the posterior moments.

Batched evaluation takes query tensors of shape (B, q, d); all B sets share
the same base samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal, Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, ndtr

from .errors import ConfigError, InputError
from .gp import Dataset, GPModel, Hyperparams, check_distinct
from .reparam import (
    BaseSamples,
    SamplePaths,
    batch_cholesky,
    cholesky_pullback,
    draw_base_samples,
    stable_cholesky,
)

Kind = Literal["EI", "PI", "SR", "UCB", "ES", "KG"]
MM_KINDS = ("EI", "PI", "SR", "UCB")
KINDS = MM_KINDS + ("ES", "KG")

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class AcquisitionSpec:
    """Acquisition kind and its parameters.

    ``alpha=None`` means "best observed output of the model's dataset".
    ``discretization`` holds the reference points used by ES and KG.
    """

    kind: str = "EI"
    alpha: Optional[float] = None
    beta: float = 2.0
    tau: float = 0.01
    discretization: Optional[np.ndarray] = None
    mc_samples: int = 128
    base_mode: str = "deterministic"
    inner_mc_samples: int = 64

    def __post_init__(self):
        kind = str(self.kind).upper()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ConfigError(f"unknown acquisition kind {self.kind!r}")
        if not self.tau > 0.0:
            raise ConfigError("tau must be positive")
        if self.mc_samples < 1 or self.inner_mc_samples < 1:
            raise ConfigError("sample counts must be >= 1")
        if self.beta < 0.0:
            raise ConfigError("beta must be non-negative")
        if self.discretization is not None:
            Xb = np.atleast_2d(np.asarray(self.discretization, dtype=float))
            Xb.setflags(write=False)
            object.__setattr__(self, "discretization", Xb)
        if kind in ("ES", "KG") and (self.discretization is None or len(self.discretization) == 0):
            raise ConfigError(f"{kind} needs a non-empty discretization")

    @property
    def is_mm(self) -> bool:
        return self.kind in MM_KINDS

    def resolve(self, model: GPModel) -> "AcquisitionSpec":
        if self.alpha is None:
            return replace(self, alpha=model.best_observed)
        return self


@dataclass(frozen=True)
class UtilityBatch:
    """Per-sample utilities and their derivatives.

    ``grad_mu`` is the direct dependence on the posterior mean (non-zero for
    UCB only); the total mean sensitivity is ``grad_y + grad_mu``.
    """

    values: np.ndarray
    grad_y: np.ndarray
    grad_mu: Optional[np.ndarray] = None


@dataclass(frozen=True)
class NormalizationOffset:
    v_min: float


@dataclass(frozen=True)
class Estimate:
    """Batched MC estimate: values and standard errors (B,), grad (B, q, d)."""

    values: np.ndarray
    stderr: np.ndarray
    grad: Optional[np.ndarray] = None
    samples: Optional[np.ndarray] = None


# ---------------------------------------------------------------- utilities


def pointwise_utility(spec: AcquisitionSpec, y, mu=None) -> np.ndarray:
    """Elementwise utility whose max over the query set defines an MM acquisition."""
    y = np.asarray(y, dtype=float)
    if spec.kind == "EI":
        return np.maximum(y - spec.alpha, 0.0)
    if spec.kind == "PI":
        return expit((y - spec.alpha) / spec.tau)
    if spec.kind == "SR":
        return y
    if spec.kind == "UCB":
        if mu is None:
            raise InputError("UCB utility needs the posterior mean")
        return mu + ucb_scale(spec.beta) * np.abs(y - mu)
    raise ConfigError(f"{spec.kind} is not a myopic maximal acquisition")


def ucb_scale(beta: float) -> float:
    return math.sqrt(beta * math.pi / 2.0)


def utility(spec: AcquisitionSpec, y, mu=None) -> UtilityBatch:
    """Utility of each sample path (last axis = query set) with its subgradient.

    The max is differentiated as a one-hot at the first argmax.
    """
    if not spec.is_mm:
        raise ConfigError(f"{spec.kind} has a nested utility; use es_concrete_value / kg_value")
    if spec.kind in ("EI", "PI") and spec.alpha is None:
        raise ConfigError("alpha must be resolved before evaluating the utility")
    y = y.y if isinstance(y, SamplePaths) else np.asarray(y, dtype=float)
    q = y.shape[-1]
    if spec.kind == "UCB":
        if mu is None:
            raise InputError("UCB utility needs the posterior mean")
        mu = np.broadcast_to(np.asarray(mu, dtype=float), y.shape)
        gamma = y - mu
        c = ucb_scale(spec.beta)
        u = mu + c * np.abs(gamma)
        idx = np.argmax(u, axis=-1)
        onehot = np.eye(q)[idx]
        sign = np.sign(np.take_along_axis(gamma, idx[..., None], axis=-1))
        values = np.take_along_axis(u, idx[..., None], axis=-1)[..., 0]
        return UtilityBatch(values, onehot * c * sign, onehot * (1.0 - c * sign))
    idx = np.argmax(y, axis=-1)
    onehot = np.eye(q)[idx]
    ymax = np.take_along_axis(y, idx[..., None], axis=-1)[..., 0]
    if spec.kind == "EI":
        imp = ymax - spec.alpha
        return UtilityBatch(np.maximum(imp, 0.0), onehot * (imp > 0.0)[..., None])
    if spec.kind == "PI":
        s = expit((ymax - spec.alpha) / spec.tau)
        return UtilityBatch(s, onehot * (s * (1.0 - s) / spec.tau)[..., None])
    return UtilityBatch(ymax, onehot)


# ---------------------------------------------------------------- MC estimators


def _base_array(z) -> np.ndarray:
    return z.z if isinstance(z, BaseSamples) else np.asarray(z, dtype=float)


def _inner_samples(spec: AcquisitionSpec, z_inner, seed: int = 0) -> np.ndarray:
    if z_inner is not None:
        return _base_array(z_inner)
    b = spec.discretization.shape[0]
    return draw_base_samples(spec.inner_mc_samples, b, "deterministic", seed).z


def evaluate(spec: AcquisitionSpec, model: GPModel, X, z, z_inner=None, grad: bool = False) -> Estimate:
    """Batched MC value (and optionally gradient) of an acquisition.

    ``X`` is (q, d) or (B, q, d); ``z`` is (m, q). ``z_inner`` supplies the
    (m_inner, b) variates for ES and defaults to a fixed deterministic draw.
    """
    spec = spec.resolve(model)
    X = np.asarray(X, dtype=float)
    single = X.ndim == 2
    if single:
        X = X[None]
    z = _base_array(z)
    if z.shape[-1] != X.shape[-2]:
        raise InputError(f"base samples have q={z.shape[-1]}, query set has q={X.shape[-2]}")
    if X.shape[-1] != model.dim:
        raise InputError(f"query has {X.shape[-1]} columns, expected {model.dim}")
    if spec.is_mm:
        est = _evaluate_mm(spec, model, X, z, grad)
    elif spec.kind == "KG":
        est = _evaluate_nested(spec, model, X, z, None, grad)
    else:
        est = _evaluate_nested(spec, model, X, z, _inner_samples(spec, z_inner), grad)
    if single:
        return Estimate(
            est.values[0], est.stderr[0], None if est.grad is None else est.grad[0], est.samples[0]
        )
    return est


def _evaluate_mm(spec, model, X, z, grad):
    m = z.shape[0]
    mean, cov = model.batch_moments(X)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    L, _ = batch_cholesky(cov)
    y = mean[:, None, :] + np.einsum("bij,kj->bki", L, z)
    ub = utility(spec, y, mean[:, None, :])
    values = ub.values.mean(axis=-1)
    stderr = ub.values.std(axis=-1, ddof=1) / math.sqrt(m) if m > 1 else np.zeros_like(values)
    g = None
    if grad:
        ybar = ub.grad_y / m
        mean_bar = ybar.sum(axis=1)
        if ub.grad_mu is not None:
            mean_bar = mean_bar + ub.grad_mu.sum(axis=1) / m
        L_bar = np.einsum("bki,kj->bij", ybar, z)
        cov_bar = cholesky_pullback(L, L_bar, check=False)
        g = model.moments_vjp(X, mean_bar, cov_bar)
        g = np.where(np.isfinite(g), g, 0.0)
    return Estimate(values, stderr, g, ub.values)


def _softmax(a, axis=-1):
    a = a - a.max(axis=axis, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=axis, keepdims=True)


def _split_joint(model, Xa, Xb):
    """Moments of [Xa; Xb] and the factors of the belief over Xb given y(Xa)."""
    q = Xa.shape[0]
    P = np.vstack([Xa, Xb])
    mean, cov = model.batch_moments(P)
    cov = 0.5 * (cov + cov.T)
    La, _ = batch_cholesky(cov[:q, :q])
    Lba = solve_triangular(La, cov[q:, :q].T, lower=True, check_finite=False).T
    return P, mean, cov, La, Lba


def _pull_cross_factor(La, Lba, Lba_bar):
    """Back through ``Lba = Sigma_ba La^{-T}``: returns (Sigma_ba_bar, Sigma_aa_bar)."""
    Sba_bar = solve_triangular(La, Lba_bar.T, lower=True, trans="T", check_finite=False).T
    La_bar = -np.tril(solve_triangular(La, Lba_bar.T @ Lba, lower=True, trans="T", check_finite=False))
    Saa_bar = cholesky_pullback(La, La_bar, check=False)
    return Sba_bar, Saa_bar


def _evaluate_nested(spec, model, X, z_a, z_b, grad):
    """ES (z_b given) or KG (z_b None), looping over the batch."""
    Xb = spec.discretization
    B, q, _ = X.shape
    m = z_a.shape[0]
    values = np.empty(B)
    stderr = np.empty(B)
    samples = np.empty((B, m))
    grads = np.zeros(X.shape) if grad else None
    for i in range(B):
        P, mean, cov, La, Lba = _split_joint(model, X[i], Xb)
        mean_b = mean[q:]
        shift = z_a @ Lba.T  # (m, b)
        if z_b is None:
            yb = mean_b + shift
            idx = np.argmax(yb, axis=-1)
            per = np.take_along_axis(yb, idx[:, None], axis=-1)[:, 0]
        else:
            cond = cov[q:, q:] - Lba @ Lba.T
            Lc, _ = batch_cholesky(0.5 * (cond + cond.T))
            yb = mean_b + shift[:, None, :] + (z_b @ Lc.T)[None, :, :]  # (m, mi, b)
            s = _softmax(yb / spec.tau)
            p = s.mean(axis=1)
            logp = np.log(np.maximum(p, np.finfo(float).tiny))
            per = np.sum(p * logp, axis=-1)  # negative entropy
        values[i] = per.mean()
        stderr[i] = per.std(ddof=1) / math.sqrt(m) if m > 1 else 0.0
        samples[i] = per
        if not grad:
            continue
        if z_b is None:
            gb = np.eye(Xb.shape[0])[idx] / m  # (m, b)
            mean_b_bar = gb.sum(axis=0)
            Lba_bar = gb.T @ z_a
            Sc_bar = np.zeros((Xb.shape[0],) * 2)
        else:
            mi = z_b.shape[0]
            gs = ((logp + 1.0) / (m * mi))[:, None, :]
            ybar = s * (gs - np.sum(s * gs, axis=-1, keepdims=True)) / spec.tau
            mean_b_bar = ybar.sum(axis=(0, 1))
            Lba_bar = ybar.sum(axis=1).T @ z_a
            Lc_bar = ybar.sum(axis=0).T @ z_b
            Sc_bar = cholesky_pullback(Lc, Lc_bar, check=False)
            Lba_bar = Lba_bar - 2.0 * Sc_bar @ Lba
        Sba_bar, Saa_bar = _pull_cross_factor(La, Lba, Lba_bar)
        n_pts = P.shape[0]
        cov_bar = np.zeros((n_pts, n_pts))
        cov_bar[:q, :q] = Saa_bar
        cov_bar[q:, :q] = Sba_bar
        cov_bar[q:, q:] = Sc_bar
        mean_bar = np.zeros(n_pts)
        mean_bar[q:] = mean_b_bar
        g = model.moments_vjp(P, mean_bar, cov_bar, n_active=q)
        grads[i] = np.where(np.isfinite(g), g, 0.0)
    return Estimate(values, stderr, grads, samples)


def mc_value(spec: AcquisitionSpec, X, model: GPModel, z) -> float:
    """Sample average of the utility over the base samples."""
    return float(evaluate(spec, model, np.atleast_2d(X), z).values)


def mc_gradient(spec: AcquisitionSpec, X, model: GPModel, z) -> np.ndarray:
    """Average of sample-path gradients w.r.t. the query set, shape (q, d)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    check_distinct(X)
    return evaluate(spec, model, X, z, grad=True).grad


def es_concrete_value(spec: AcquisitionSpec, X, model: GPModel, z_a, z_b) -> float:
    """Negative expected entropy of the softmax-relaxed argmax over the discretization."""
    if spec.kind != "ES":
        spec = replace(spec, kind="ES")
    return float(evaluate(spec, model, np.atleast_2d(X), z_a, z_inner=z_b).values)


def kg_value(spec: AcquisitionSpec, X, model: GPModel, z_a) -> float:
    """MC average of the max of the fantasy-updated discretization means."""
    if spec.kind != "KG":
        spec = replace(spec, kind="KG")
    return float(evaluate(spec, model, np.atleast_2d(X), z_a).values)


# ---------------------------------------------------------------- hard limits


def hard_pi_value(alpha: float, model: GPModel, X, z) -> float:
    """PI with the exact step function, for checking the zero-temperature limit."""
    X = np.atleast_2d(X)
    mean, cov = model.batch_moments(X)
    L, _ = stable_cholesky(0.5 * (cov + cov.T))
    y = mean + _base_array(z) @ L.T
    return float(np.mean(np.max(y, axis=-1) > alpha))


def hard_es_value(spec: AcquisitionSpec, model: GPModel, X, z_a, z_b) -> float:
    """ES with one-hot argmax events instead of the softmax relaxation."""
    X = np.atleast_2d(X)
    q = X.shape[0]
    _, mean, cov, _, Lba = _split_joint(model, X, spec.discretization)
    cond = cov[q:, q:] - Lba @ Lba.T
    Lc, _ = batch_cholesky(0.5 * (cond + cond.T))
    z_a, z_b = _base_array(z_a), _base_array(z_b)
    yb = mean[q:] + (z_a @ Lba.T)[:, None, :] + (z_b @ Lc.T)[None, :, :]
    b = yb.shape[-1]
    p = np.eye(b)[np.argmax(yb, axis=-1)].mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0.0, p * np.log(p), 0.0)
    return float(np.mean(plogp.sum(axis=-1)))


# ---------------------------------------------------------------- closed forms


def expected_improvement(mean, sd, alpha):
    """Closed-form EI of N(mean, sd^2) over ``alpha``, elementwise."""
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    diff = mean - alpha
    with np.errstate(divide="ignore", invalid="ignore"):
        u = diff / sd
        ei = diff * ndtr(u) + sd * _INV_SQRT_2PI * np.exp(-0.5 * u * u)
    return np.where(sd > 0.0, np.maximum(ei, 0.0), np.maximum(diff, 0.0))


def expected_improvement_grad(mean, sd, alpha):
    """Partial derivatives of closed-form EI w.r.t. the mean and the standard deviation."""
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (mean - alpha) / sd
        d_mean = ndtr(u)
        d_sd = _INV_SQRT_2PI * np.exp(-0.5 * u * u)
    pos = sd > 0.0
    return np.where(pos, d_mean, (mean > alpha).astype(float)), np.where(pos, d_sd, 0.0)


def marginal_ei_closed_form(x, model: GPModel, alpha: float) -> float:
    """Exact expected improvement of f(x) over ``alpha`` under the GP posterior."""
    mean, var = model.marginals(np.atleast_2d(x))
    return float(expected_improvement(mean, np.sqrt(var), alpha)[0])


def marginal_ei_and_grad(X, model: GPModel, alpha: float):
    """Closed-form EI at each row of X with its input gradient, ((n,), (n, d))."""
    X = np.atleast_2d(X)
    mean, var = model.marginals(X)
    sd = np.sqrt(var)
    ei = expected_improvement(mean, sd, alpha)
    dmean, dvar = model.marginals_grad(X)
    g_mean, g_sd = expected_improvement_grad(mean, sd, alpha)
    with np.errstate(divide="ignore", invalid="ignore"):
        dsd = np.where(sd[:, None] > 0.0, dvar / (2.0 * sd[:, None]), 0.0)
    return ei, g_mean[:, None] * dmean + g_sd[:, None] * dsd


def marginal_acquisition(spec: AcquisitionSpec, model: GPModel, X) -> np.ndarray:
    """Cheap single-point acquisition used to seed multi-start optimizers.

    Closed forms for EI, PI and UCB; SR uses the mean shifted to be non-negative
    over X. ES and KG fall back to EI at the best observed value.
    """
    spec = spec.resolve(model)
    mean, var = model.marginals(np.atleast_2d(X))
    sd = np.sqrt(var)
    if spec.kind == "PI":
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(sd > 0.0, ndtr((mean - spec.alpha) / sd), (mean > spec.alpha) * 1.0)
    if spec.kind == "UCB":
        return mean + math.sqrt(spec.beta) * sd
    if spec.kind == "SR":
        return mean - mean.min()
    alpha = spec.alpha if spec.kind == "EI" else model.best_observed
    return expected_improvement(mean, sd, alpha)


# ---------------------------------------------------------------- incremental forms


def _state_threshold(state: Dataset, alpha0: float) -> float:
    fantasized = state.outputs[state.noiseless]
    return max(alpha0, float(fantasized.max())) if fantasized.size else alpha0


def incremental_ei_value(x, fantasy_states: Sequence[Dataset], alpha0: float, hp: Hyperparams) -> float:
    """Average closed-form EI at x over fantasy states.

    Each state's threshold is the larger of ``alpha0`` and the outcomes
    fantasized into it (its noiseless entries).
    """
    if not fantasy_states:
        raise ConfigError("need at least one fantasy state")
    vals = [
        marginal_ei_closed_form(x, GPModel(state, hp), _state_threshold(state, alpha0))
        for state in fantasy_states
    ]
    return float(np.mean(vals))


def incremental_ei_paths(X, model: GPModel, z, alpha: float) -> np.ndarray:
    """Per-path sum of incremental closed-form EI terms along a query sequence.

    Row k of ``z`` fantasizes noiseless outcomes y_1..y_{q-1} sequentially;
    term j is the closed-form EI of x_j given the earlier fantasies, with
    threshold max(alpha, y_1, ..., y_{j-1}). Conditioning is done through the
    joint Cholesky factor, which is equivalent to refitting on each state.
    """
    X = np.atleast_2d(X)
    z = _base_array(z)
    mean, cov = model.batch_moments(X)
    L, _ = stable_cholesky(0.5 * (cov + cov.T))
    q = X.shape[0]
    total = np.zeros(z.shape[0])
    incumbent = np.full(z.shape[0], float(alpha))
    for j in range(q):
        cond_mean = mean[j] + z[:, :j] @ L[j, :j]
        total += expected_improvement(cond_mean, np.full_like(cond_mean, L[j, j]), incumbent)
        incumbent = np.maximum(incumbent, cond_mean + L[j, j] * z[:, j])
    return total


def discrete_derivative_mc(spec: AcquisitionSpec, x_new, X_old, model: GPModel, z, v_min: float | None = None) -> float:
    """MC estimate of L(X_old + {x_new}) - L(X_old) as E[ReLU(l(y_new) - max l(y_old))].

    ``z`` has q_old + 1 columns, the last one driving x_new. With an empty
    X_old the max over the empty set is ``v_min`` (0 for EI and PI).
    """
    spec = spec.resolve(model)
    if not spec.is_mm:
        raise ConfigError(f"discrete derivative needs an MM acquisition, got {spec.kind}")
    x_new = np.atleast_2d(x_new)
    X_old = np.zeros((0, model.dim)) if X_old is None else np.atleast_2d(X_old).reshape(-1, model.dim)
    X = np.vstack([X_old, x_new])
    z = _base_array(z)
    if z.shape[-1] != X.shape[0]:
        raise InputError(f"need {X.shape[0]} base-sample columns, got {z.shape[-1]}")
    mean, cov = model.batch_moments(X)
    L, _ = stable_cholesky(0.5 * (cov + cov.T))
    y = mean + z @ L.T
    u = pointwise_utility(spec, y, mean)
    k = X_old.shape[0]
    if k:
        old = u[:, :k].max(axis=-1)
    else:
        if v_min is None:
            if spec.kind not in ("EI", "PI"):
                raise ConfigError(f"{spec.kind} needs an explicit v_min for an empty base set")
            v_min = 0.0
        old = np.full(z.shape[0], float(v_min))
    return float(np.mean(np.maximum(u[:, k] - old, 0.0)))


def normalization_offset(spec: AcquisitionSpec, model: GPModel, grid, z=None) -> NormalizationOffset:
    """Lower bound on the pointwise utility over a finite ground set.

    EI and PI are normalized already. UCB uses the smallest posterior mean on
    the grid. For SR the bound is a heuristic: the smallest sampled path value
    on the grid minus three of the largest posterior standard deviations.
    """
    if spec.kind in ("EI", "PI"):
        return NormalizationOffset(0.0)
    grid = np.atleast_2d(grid)
    if spec.kind == "UCB":
        mean, _ = model.marginals(grid)
        return NormalizationOffset(float(mean.min()))
    if spec.kind == "SR":
        mean, cov = model.batch_moments(grid)
        L, _ = stable_cholesky(0.5 * (cov + cov.T))
        zz = draw_base_samples(spec.mc_samples, grid.shape[0]).z if z is None else _base_array(z)
        paths = mean + zz @ L.T
        sd_max = float(np.sqrt(np.max(np.diag(cov).clip(min=0.0))))
        return NormalizationOffset(float(paths.min()) - 3.0 * sd_max)
    raise ConfigError(f"no normalization offset for non-MM kind {spec.kind}")
