"""Gaussian process surrogate with an anisotropic Matern-5/2 kernel.

Inputs live in the unit cube. ``GPModel`` caches the Cholesky factor of the
training covariance so that many query sets can be scored against one
dataset; the module-level functions are thin stateless wrappers around it.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .errors import (
    ConfigError,
    DegenerateQueryError,
    FitError,
    InputError,
    NotPositiveDefiniteError,
)
from .reparam import stable_cholesky

logger = logging.getLogger(__name__)

SQRT5 = math.sqrt(5.0)
DUPLICATE_TOL = 1e-9
_BOUND_TOL = 1e-12


@dataclass(frozen=True)
class Dataset:
    """Observed pairs, optionally extended with noiseless fantasy outcomes."""

    inputs: np.ndarray
    outputs: np.ndarray
    noiseless: np.ndarray = None

    def __post_init__(self):
        X = np.array(self.inputs, dtype=float, ndmin=2)
        y = np.array(self.outputs, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise InputError(f"{X.shape[0]} inputs but {y.shape[0]} outputs")
        if X.shape[1] < 1:
            raise InputError("dimension must be >= 1")
        if X.size and (X.min() < -_BOUND_TOL or X.max() > 1.0 + _BOUND_TOL):
            raise InputError("dataset inputs must lie in the unit cube")
        mask = (
            np.zeros(y.shape[0], dtype=bool)
            if self.noiseless is None
            else np.array(self.noiseless, dtype=bool).reshape(-1)
        )
        if mask.shape[0] != y.shape[0]:
            raise InputError("noiseless mask length differs from outputs")
        for a in (X, y, mask):
            a.setflags(write=False)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "outputs", y)
        object.__setattr__(self, "noiseless", mask)

    @classmethod
    def empty(cls, dim: int) -> "Dataset":
        return cls(np.zeros((0, dim)), np.zeros(0))

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def __len__(self) -> int:
        return self.outputs.shape[0]

    def append(self, X, y, noiseless: bool = False) -> "Dataset":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        return Dataset(
            np.vstack([self.inputs, X]),
            np.concatenate([self.outputs, y]),
            np.concatenate([self.noiseless, np.full(y.shape[0], noiseless)]),
        )


@dataclass(frozen=True)
class Hyperparams:
    lengthscales: np.ndarray
    signal_variance: float = 1.0
    noise_variance: float = 1e-3
    mean_constant: float = 0.0

    def __post_init__(self):
        ls = np.array(self.lengthscales, dtype=float).reshape(-1)
        ls.setflags(write=False)
        object.__setattr__(self, "lengthscales", ls)
        if ls.size < 1 or np.any(~(ls > 0.0)):
            raise ConfigError(f"lengthscales must be positive, got {ls}")
        if not self.signal_variance > 0.0:
            raise ConfigError("signal_variance must be positive")
        if not self.noise_variance >= 0.0:
            raise ConfigError("noise_variance must be non-negative")

    @property
    def dim(self) -> int:
        return self.lengthscales.shape[0]


@dataclass(frozen=True)
class MvnMoments:
    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray
    jitter_used: float = 0.0


# ---------------------------------------------------------------- kernel


def _scaled_diff(X1, X2, lengthscales):
    return (X1[..., :, None, :] - X2[..., None, :, :]) / lengthscales


def _matern52(X1, X2, hp: Hyperparams) -> np.ndarray:
    r = np.sqrt(np.sum(_scaled_diff(X1, X2, hp.lengthscales) ** 2, axis=-1))
    return hp.signal_variance * (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * np.exp(-SQRT5 * r)


def _matern52_grad(X1, X2, hp: Hyperparams) -> np.ndarray:
    """d k(x1, x2) / d x1, shape (..., a, b, d). Smooth at zero distance."""
    diff = _scaled_diff(X1, X2, hp.lengthscales)
    r = np.sqrt(np.sum(diff**2, axis=-1))
    radial = -(5.0 / 3.0) * hp.signal_variance * (1.0 + SQRT5 * r) * np.exp(-SQRT5 * r)
    return radial[..., None] * diff / hp.lengthscales


def matern52_cross_covariance(X1, X2, hp: Hyperparams) -> np.ndarray:
    """Anisotropic Matern-5/2 covariance matrix between the rows of X1 and X2.

    k(r) = s (1 + sqrt(5) r + 5 r^2 / 3) exp(-sqrt(5) r), with r the distance
    after dividing each coordinate by its lengthscale.
    """
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    if X1.shape[-1] != hp.dim or X2.shape[-1] != hp.dim:
        raise InputError(
            f"column counts {X1.shape[-1]}, {X2.shape[-1]} do not match d={hp.dim}"
        )
    return _matern52(X1, X2, hp)


def _check_query(X, dim) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[-1] != dim:
        raise InputError(f"query has {X.shape[-1]} columns, expected {dim}")
    if X.shape[-2] < 1:
        raise InputError("query set is empty")
    return X


def check_distinct(X, tol: float = DUPLICATE_TOL) -> None:
    """Raise :class:`DegenerateQueryError` if two rows of X coincide within tol."""
    X = np.asarray(X, dtype=float)
    q = X.shape[-2]
    if q < 2:
        return
    gaps = np.max(np.abs(X[..., :, None, :] - X[..., None, :, :]), axis=-1)
    gaps = np.where(np.eye(q, dtype=bool), np.inf, gaps)
    if np.any(gaps <= tol):
        raise DegenerateQueryError("query set contains duplicate rows")


# ---------------------------------------------------------------- model


class GPModel:
    """Exact GP posterior for a fixed dataset and hyperparameters.

    Fantasy points (``Dataset.noiseless``) enter the training covariance
    without the observation-noise term.
    """

    def __init__(self, data: Dataset, hp: Hyperparams, _chol=None):
        if data.dim != hp.dim:
            raise InputError(f"dataset dim {data.dim} != hyperparameter dim {hp.dim}")
        self.data = data
        self.hp = hp
        n = len(data)
        self.jitter_used = 0.0
        if n == 0:
            self._chol = np.zeros((0, 0))
            self._alpha = np.zeros(0)
            return
        if _chol is None:
            K = self.train_covariance()
            try:
                _chol, self.jitter_used = stable_cholesky(K)
            except NotPositiveDefiniteError as exc:
                raise NotPositiveDefiniteError(
                    f"training covariance failed after max jitter: {exc}"
                ) from exc
        self._chol = _chol
        self._alpha = cho_solve((self._chol, True), data.outputs - hp.mean_constant)

    def train_covariance(self) -> np.ndarray:
        X = self.data.inputs
        noise = np.where(self.data.noiseless, 0.0, self.hp.noise_variance)
        return _matern52(X, X, self.hp) + np.diag(noise)

    @property
    def dim(self) -> int:
        return self.hp.dim

    @property
    def n(self) -> int:
        return len(self.data)

    @property
    def best_observed(self) -> float:
        if self.n == 0:
            return self.hp.mean_constant
        return float(np.max(self.data.outputs))

    # -- moments ---------------------------------------------------------

    def _cross(self, X):
        """Cross covariance to the training set and its whitened form."""
        shape = X.shape[:-1]
        flat = X.reshape(-1, self.dim)
        Kxn = _matern52(flat, self.data.inputs, self.hp)
        V = solve_triangular(self._chol, Kxn.T, lower=True)
        return Kxn.reshape(shape + (self.n,)), V.T.reshape(shape + (self.n,))

    def batch_moments(self, X):
        """Posterior mean (..., P) and covariance (..., P, P) of the latent f."""
        X = np.asarray(X, dtype=float)
        mean = np.full(X.shape[:-1], self.hp.mean_constant)
        cov = _matern52(X, X, self.hp)
        if self.n:
            Kxn, V = self._cross(X)
            mean = mean + Kxn @ self._alpha
            cov = cov - V @ np.swapaxes(V, -1, -2)
        return mean, cov

    def marginals(self, X):
        """Posterior mean and variance at each row of X, shape (n,)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        mean = np.full(X.shape[0], self.hp.mean_constant)
        var = np.full(X.shape[0], self.hp.signal_variance)
        if self.n:
            Kxn, V = self._cross(X)
            mean = mean + Kxn @ self._alpha
            var = var - np.sum(V * V, axis=-1)
        return mean, np.maximum(var, 0.0)

    def marginals_grad(self, X):
        """Gradients of the marginal mean and variance w.r.t. each row, (n, d)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if not self.n:
            zeros = np.zeros_like(X)
            return zeros, zeros.copy()
        dK = _matern52_grad(X, self.data.inputs, self.hp)  # (n, N, d)
        _, V = self._cross(X)
        W = solve_triangular(self._chol, V.T, lower=True, trans="T").T
        dmean = np.einsum("ind,n->id", dK, self._alpha)
        dvar = -2.0 * np.einsum("ind,in->id", dK, W)
        return dmean, dvar

    def moments(self, X) -> MvnMoments:
        X = _check_query(X, self.dim)
        mean, cov = self.batch_moments(X)
        cov = 0.5 * (cov + cov.T)
        chol, jitter = stable_cholesky(cov)
        return MvnMoments(mean=mean, cov=cov, chol=chol, jitter_used=jitter)

    # -- derivatives -----------------------------------------------------

    def moments_vjp(self, X, mean_bar, cov_bar, n_active: int | None = None):
        """Pull sensitivities of (mean, cov) back to the query inputs.

        Batched over leading dimensions. Only the first ``n_active`` rows of
        each query set receive a gradient; the remaining rows are treated as
        fixed (used for discretization points).
        """
        X = np.asarray(X, dtype=float)
        P = X.shape[-2]
        a = P if n_active is None else n_active
        S = 0.5 * (cov_bar + np.swapaxes(cov_bar, -1, -2))
        Xa = X[..., :a, :]
        dKxx = _matern52_grad(Xa, X, self.hp)  # (..., a, P, d)
        grad = 2.0 * np.einsum("...ijd,...ij->...id", dKxx, S[..., :a, :])
        if self.n:
            _, V = self._cross(X)
            flat = V.reshape(-1, self.n)
            W = solve_triangular(self._chol, flat.T, lower=True, trans="T").T
            W = W.reshape(V.shape)  # (..., P, n): rows of A^{-1} k(X_train, x_j)
            coef = mean_bar[..., :a, None] * self._alpha - 2.0 * (S[..., :a, :] @ W)
            dKxn = _matern52_grad(Xa, self.data.inputs, self.hp)  # (..., a, n, d)
            grad = grad + np.einsum("...ind,...in->...id", dKxn, coef)
        return grad

    def input_jacobians(self, X):
        """Full Jacobians of the posterior moments w.r.t. the flattened query.

        Returns ``dmean`` with shape (q, q*d) and ``dcov`` with shape
        (q, q, q*d), where column ``j*d + k`` refers to coordinate k of row j.
        """
        X = _check_query(X, self.dim)
        check_distinct(X)
        q, d = X.shape
        dmean = np.zeros((q, q, d))
        dcov = np.zeros((q, q, q, d))
        dKxx = _matern52_grad(X, X, self.hp)  # (q, q, d): d k(x_i, x_j) / d x_i
        idx = np.arange(q)
        dcov[idx[:, None], idx[None, :], idx[:, None]] += dKxx
        dcov[idx[:, None], idx[None, :], idx[None, :]] += np.swapaxes(dKxx, 0, 1)
        if self.n:
            _, V = self._cross(X)
            W = solve_triangular(self._chol, V.T, lower=True, trans="T").T  # (q, n)
            dKxn = _matern52_grad(X, self.data.inputs, self.hp)  # (q, n, d)
            dmean[idx, idx] = np.einsum("ind,n->id", dKxn, self._alpha)
            # d/dx_i of k_i^T A^{-1} k_j
            T = np.einsum("ind,jn->ijd", dKxn, W)  # (i, j, d)
            dcov[idx[:, None], idx[None, :], idx[:, None]] -= T
            dcov[idx[:, None], idx[None, :], idx[None, :]] -= np.swapaxes(T, 0, 1)
        return dmean.reshape(q, q * d), dcov.reshape(q, q, q * d)

    # -- conditioning ----------------------------------------------------

    def condition(self, X, y, noiseless: bool = True) -> "GPModel":
        """Return a model conditioned on extra pairs by extending the cached factor."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        data = self.data.append(X, y, noiseless=noiseless)
        if self.jitter_used:
            return GPModel(data, self.hp)
        noise = 0.0 if noiseless else self.hp.noise_variance
        K_new = _matern52(X, X, self.hp) + noise * np.eye(X.shape[0])
        if self.n:
            K_cross = _matern52(self.data.inputs, X, self.hp)
            B = solve_triangular(self._chol, K_cross, lower=True)
            schur = K_new - B.T @ B
        else:
            B = np.zeros((0, X.shape[0]))
            schur = K_new
        try:
            C = np.linalg.cholesky(schur)
        except np.linalg.LinAlgError:
            return GPModel(data, self.hp)
        n, k = self.n, X.shape[0]
        chol = np.zeros((n + k, n + k))
        chol[:n, :n] = self._chol
        chol[n:, :n] = B.T
        chol[n:, n:] = C
        return GPModel(data, self.hp, _chol=chol)


# ---------------------------------------------------------------- stateless API


def posterior_moments(X, data: Dataset, hp: Hyperparams) -> MvnMoments:
    """Posterior belief (mean, cov, Cholesky) of f at the rows of X."""
    return GPModel(data, hp).moments(X)


def posterior_input_jacobians(X, data: Dataset, hp: Hyperparams):
    return GPModel(data, hp).input_jacobians(X)


def fantasize(data: Dataset, x, y, noiseless: bool = True) -> Dataset:
    """Append one (hypothetical) observation. Fantasies are noiseless by default."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if x.shape[1] != data.dim:
        raise InputError(f"x has {x.shape[1]} coordinates, dataset has {data.dim}")
    return data.append(x, np.atleast_1d(float(y)), noiseless=noiseless)


# ---------------------------------------------------------------- MAP fitting


@dataclass(frozen=True)
class PriorConfig:
    """Log-normal hyperpriors, as (log-mean, log-sd) pairs, plus search bounds.

    ``use_priors=False`` turns the objective into the plain log marginal
    likelihood. Bounds apply to the standardized problem.
    """

    lengthscale: tuple = (0.0, 1.0)
    signal_variance: tuple = (0.0, 1.0)
    noise_variance: tuple = (-6.0, 1.0)
    use_priors: bool = True
    lengthscale_bounds: tuple = (1e-2, 1e2)
    signal_bounds: tuple = (1e-4, 1e2)
    noise_bounds: tuple = (1e-8, 1.0)
    mean_bounds: tuple = (-10.0, 10.0)
    seed: int = 0


@dataclass
class _FitProblem:
    X: np.ndarray
    y: np.ndarray
    prior: PriorConfig
    d: int = field(init=False)

    def __post_init__(self):
        self.d = self.X.shape[1]
        self.sqdiff = (self.X[:, None, :] - self.X[None, :, :]) ** 2  # (n, n, d)

    def unpack(self, theta):
        d = self.d
        return np.exp(theta[:d]), math.exp(theta[d]), math.exp(theta[d + 1]), theta[d + 2]

    def objective(self, theta):
        """Negative (log marginal likelihood + log prior) and its gradient."""
        ls, s, noise, m = self.unpack(theta)
        n, d = self.X.shape
        scaled = self.sqdiff / ls**2
        r = np.sqrt(np.sum(scaled, axis=-1))
        e = np.exp(-SQRT5 * r)
        Kf = s * (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * e
        A = Kf + noise * np.eye(n)
        try:
            L = np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            return np.inf, np.zeros_like(theta)
        resid = self.y - m
        alpha = cho_solve((L, True), resid)
        lml = -0.5 * resid @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * math.log(2 * math.pi)
        inner = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(n))
        grad = np.empty_like(theta)
        common = (5.0 / 3.0) * s * (1.0 + SQRT5 * r) * e
        for k in range(d):
            grad[k] = 0.5 * np.sum(inner * (common * scaled[..., k]))
        grad[d] = 0.5 * np.sum(inner * Kf)
        grad[d + 1] = 0.5 * noise * np.trace(inner)
        grad[d + 2] = np.sum(alpha)
        if self.prior.use_priors:
            p = self.prior
            for idx, (mu, sd) in [(slice(0, d), p.lengthscale), (d, p.signal_variance), (d + 1, p.noise_variance)]:
                lml += np.sum(-0.5 * ((theta[idx] - mu) / sd) ** 2 - math.log(sd * math.sqrt(2 * math.pi)))
                grad[idx] -= (theta[idx] - mu) / sd**2
        return -lml, -grad

    def bounds(self):
        p = self.prior
        logb = lambda b: (math.log(b[0]), math.log(b[1]))
        return [logb(p.lengthscale_bounds)] * self.d + [
            logb(p.signal_bounds),
            logb(p.noise_bounds),
            p.mean_bounds,
        ]


def fit_hyperparameters_map(data: Dataset, prior_cfg: PriorConfig | None = None, restarts: int = 8) -> Hyperparams:
    """MAP estimate of GP hyperparameters via multi-restart L-BFGS-B in log-space.

    Outputs are standardized before fitting and the returned hyperparameters
    are mapped back to the original output scale.
    """
    prior_cfg = prior_cfg or PriorConfig()
    n = len(data)
    if n < 2:
        raise ConfigError("MAP fitting needs at least two observations")
    y_mean = float(np.mean(data.outputs))
    y_std = float(np.std(data.outputs))
    if not y_std > 0.0:
        y_std = 1.0
    problem = _FitProblem(data.inputs, (data.outputs - y_mean) / y_std, prior_cfg)
    bounds = problem.bounds()
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    d = data.dim
    rng = np.random.default_rng(prior_cfg.seed)
    p = prior_cfg
    best, diagnostics = None, []
    for i in range(restarts):
        if i == 0:
            theta0 = np.r_[np.full(d, p.lengthscale[0]), p.signal_variance[0], p.noise_variance[0], 0.0]
        else:
            theta0 = np.r_[
                rng.normal(p.lengthscale[0], p.lengthscale[1], d),
                rng.normal(*p.signal_variance),
                rng.normal(*p.noise_variance),
                rng.normal(0.0, 0.5),
            ]
        theta0 = np.clip(theta0, lo, hi)
        try:
            res = minimize(problem.objective, theta0, jac=True, method="L-BFGS-B", bounds=bounds)
        except (ValueError, np.linalg.LinAlgError) as exc:
            diagnostics.append(f"restart {i}: {exc}")
            continue
        if not np.isfinite(res.fun):
            diagnostics.append(f"restart {i}: non-finite objective ({res.message})")
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise FitError("all MAP restarts failed", diagnostics)
    ls, s, noise, m = problem.unpack(best.x)
    return Hyperparams(
        lengthscales=ls,
        signal_variance=s * y_std**2,
        noise_variance=noise * y_std**2,
        mean_constant=y_mean + y_std * m,
    )


def log_marginal_likelihood(data: Dataset, hp: Hyperparams) -> float:
    model = GPModel(data, hp)
    resid = data.outputs - hp.mean_constant
    return float(
        -0.5 * resid @ model._alpha
        - np.sum(np.log(np.diag(model._chol)))
        - 0.5 * len(data) * math.log(2 * math.pi)
    )
