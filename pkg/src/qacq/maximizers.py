"""Inner-loop solvers for choosing a batch of q query points.

Budgets are either a count of query-set evaluations (``budget_mode="evals"``,
bit-reproducible) or wall-clock seconds. One evaluation is one acquisition
estimate for one query set, with or without its gradient. Scoring the
initialization pool with a closed-form marginal acquisition is not charged.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .acquisitions import (
    AcquisitionSpec,
    evaluate,
    marginal_acquisition,
    marginal_ei_and_grad,
)
from .errors import ConfigError
from .gp import GPModel
from .reparam import draw_base_samples

_KIND_ALIASES = {"grad": "grad", "grad_ascent": "grad", "rs": "rs", "random_search": "rs"}
_RS_CHUNK = 128


def _derived_seed(*words) -> int:
    return int(np.random.SeedSequence([int(w) for w in words]).generate_state(1)[0])


@dataclass(frozen=True)
class MaximizerConfig:
    """Solver settings.

    ``n_starts=None`` means 32 for greedy rounds and 64 for joint selection.
    ``budget`` is a count of evaluations or seconds depending on ``budget_mode``.
    """

    kind: str = "grad"
    n_starts: Optional[int] = None
    step_size: float = 1.0 / 40.0
    minibatch: int = 128
    budget: float = 2**12
    budget_mode: str = "evals"
    bounds: Optional[tuple] = None
    seed: int = 0
    eval_samples: int = 1024
    pool_uniform: int = 2048
    pool_local: int = 512
    fantasize_pending: bool = True

    def __post_init__(self):
        kind = _KIND_ALIASES.get(str(self.kind).lower())
        if kind is None:
            raise ConfigError(f"unknown maximizer kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.budget_mode not in ("evals", "seconds"):
            raise ConfigError(f"unknown budget mode {self.budget_mode!r}")
        if self.n_starts is not None and self.n_starts < 1:
            raise ConfigError("n_starts must be >= 1")
        if not self.step_size > 0.0:
            raise ConfigError("step_size must be positive")
        if not self.budget > 0:
            raise ConfigError("budget must be positive")
        if self.minibatch < 1 or self.eval_samples < 1:
            raise ConfigError("sample sizes must be >= 1")

    def box(self, d: int):
        if self.bounds is None:
            return np.zeros(d), np.ones(d)
        lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (d,)).copy() for b in self.bounds)
        if np.any(hi <= lo):
            raise ConfigError("bounds must satisfy lower < upper")
        return lo, hi

    def starts_for(self, joint: bool) -> int:
        if self.n_starts is not None:
            return self.n_starts
        return 64 if joint else 32


@dataclass(frozen=True)
class SelectionResult:
    X: np.ndarray
    acq_value: float
    evaluations: int
    elapsed_s: float
    warning: Optional[str] = None
    trace: tuple = field(default_factory=tuple)


class _Budget:
    """Tracks evaluations or elapsed time against a limit."""

    def __init__(self, cfg: MaximizerConfig, amount: float):
        self.mode = cfg.budget_mode
        self.amount = amount
        self.used = 0
        self.t0 = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self.t0

    def charge(self, n: int) -> None:
        self.used += int(n)

    def steps_allowed(self, n_starts: int) -> Optional[int]:
        """Gradient steps per start in evals mode; None means run until time is up."""
        if self.mode == "evals":
            return max(0, (int(self.amount) - n_starts) // n_starts)
        return None

    def time_left(self, reserve: float = 0.0) -> bool:
        return self.elapsed() < self.amount * (1.0 - reserve)


# ---------------------------------------------------------------- objectives


class QuerySetObjective:
    """MC acquisition over query sets (B, q, d) for a fixed model.

    ``prefix`` holds already-chosen points that are prepended to every query
    set; only the trailing free points are optimized. Scoring samples are drawn
    ``score_width`` columns wide and sliced, so a set and its extensions share
    the outcomes of their common points.
    """

    def __init__(self, spec: AcquisitionSpec, model: GPModel, cfg: MaximizerConfig, prefix=None, score_width: int = 0):
        self.spec = spec.resolve(model)
        self.model = model
        self.cfg = cfg
        self.prefix = np.zeros((0, model.dim)) if prefix is None else np.atleast_2d(prefix)
        self.score_width = score_width
        self._score_z = None

    def _full(self, X):
        if not len(self.prefix):
            return X
        pre = np.broadcast_to(self.prefix, (X.shape[0],) + self.prefix.shape)
        return np.concatenate([pre, X], axis=1)

    def value_grad(self, X, step: int):
        Xf = self._full(X)
        q = Xf.shape[1]
        z = draw_base_samples(self.cfg.minibatch, q, "deterministic", _derived_seed(self.cfg.seed, step, 11)).z
        est = evaluate(self.spec, self.model, Xf, z, grad=True)
        return est.values, est.grad[:, len(self.prefix):, :]

    def score(self, X):
        Xf = self._full(np.asarray(X, dtype=float))
        q = Xf.shape[1]
        if self._score_z is None or self._score_z.shape[1] < q:
            width = max(q, self.score_width)
            self._score_z = draw_base_samples(self.cfg.eval_samples, width, "deterministic", self.cfg.seed).z
        z = self._score_z[:, :q]
        out = np.empty(Xf.shape[0])
        for s in range(0, Xf.shape[0], _RS_CHUNK):
            out[s:s + _RS_CHUNK] = evaluate(self.spec, self.model, Xf[s:s + _RS_CHUNK], z).values
        return out


class _AveragedEIObjective:
    """Closed-form EI at single points averaged over fantasy states."""

    def __init__(self, states, incumbents):
        self.states = states
        self.incumbents = np.asarray(incumbents, dtype=float)

    def value_grad(self, X, step: int = 0):
        pts = X[:, 0, :]
        val = np.zeros(pts.shape[0])
        grad = np.zeros_like(pts)
        for st, inc in zip(self.states, self.incumbents):
            v, g = marginal_ei_and_grad(pts, st, inc)
            val += v
            grad += g
        k = len(self.states)
        return val / k, (grad / k)[:, None, :]

    def score(self, X):
        return self.value_grad(np.asarray(X, dtype=float))[0]


# ---------------------------------------------------------------- solvers


def _pick_best(values, X):
    values = np.where(np.isfinite(values), values, -np.inf)
    i = int(np.argmax(values))  # ties go to the lowest start index
    return i, float(values[i])


def grad_ascend_multistart(objective, starts, cfg: MaximizerConfig, budget: Optional[float] = None) -> SelectionResult:
    """Adam ascent from each start, projected onto the bounds.

    ``objective`` provides ``value_grad(X, step)`` for (B, q, d) batches and
    ``score(X)`` for the final deterministic comparison. Each start is charged
    one evaluation per step plus one for final scoring.
    """
    starts = np.asarray(starts, dtype=float)
    if starts.ndim == 2:
        starts = starts[:, None, :]
    n, q, d = starts.shape
    lo, hi = cfg.box(d)
    budget = _Budget(cfg, cfg.budget if budget is None else budget)
    X = np.clip(starts, lo, hi)
    m1 = np.zeros_like(X)
    m2 = np.zeros_like(X)
    b1, b2, eps = 0.9, 0.999, 1e-8
    limit = budget.steps_allowed(n)
    warning = None
    if limit == 0:
        warning = "budget too small for a gradient step; returning best start"
    step = 0
    while (limit is None and budget.time_left(reserve=0.1)) or (limit is not None and step < limit):
        _, g = objective.value_grad(X, step)
        g = np.where(np.isfinite(g), g, 0.0)
        step += 1
        budget.charge(n)
        m1 = b1 * m1 + (1.0 - b1) * g
        m2 = b2 * m2 + (1.0 - b2) * g * g
        mhat = m1 / (1.0 - b1**step)
        vhat = m2 / (1.0 - b2**step)
        X = np.clip(X + cfg.step_size * mhat / (np.sqrt(vhat) + eps), lo, hi)
    if limit is None and step == 0:
        warning = "budget too small for a gradient step; returning best start"
    scores = objective.score(X)
    budget.charge(n)
    i, best = _pick_best(scores, X)
    return SelectionResult(X[i].copy(), best, budget.used, budget.elapsed(), warning)


def random_search(objective, q: int, d: int, cfg: MaximizerConfig, budget: Optional[float] = None, seed: Optional[int] = None) -> SelectionResult:
    """Uniform query sets scored with the deterministic estimator; best one wins."""
    lo, hi = cfg.box(d)
    budget = _Budget(cfg, cfg.budget if budget is None else budget)
    gen = np.random.default_rng(_derived_seed(cfg.seed if seed is None else seed, 23))
    best_v, best_X = -np.inf, None
    while True:
        if budget.mode == "evals":
            size = min(_RS_CHUNK, int(budget.amount) - budget.used)
            if size <= 0:
                break
        else:
            if best_X is not None and not budget.time_left(reserve=0.05):
                break
            size = _RS_CHUNK
        X = lo + gen.random((size, q, d)) * (hi - lo)
        vals = objective.score(X)
        budget.charge(size)
        i, v = _pick_best(vals, X)
        if v > best_v or best_X is None:
            best_v, best_X = v, X[i].copy()
    return SelectionResult(best_X, float(best_v), budget.used, budget.elapsed())


def multi_start_init(
    marginal_acq: Callable[[np.ndarray], np.ndarray],
    n_points: int,
    d: int,
    seed: int = 0,
    incumbent=None,
    cfg: Optional[MaximizerConfig] = None,
) -> np.ndarray:
    """Draw ``n_points`` starts from a candidate pool with probability proportional to positive score.

    The pool has uniform points plus Gaussian perturbations of the incumbent.
    If no score is positive the starts are drawn uniformly from the pool.
    """
    cfg = cfg or MaximizerConfig()
    lo, hi = cfg.box(d)
    gen = np.random.default_rng(_derived_seed(seed, 31))
    pool = [lo + gen.random((cfg.pool_uniform, d)) * (hi - lo)]
    if incumbent is not None and cfg.pool_local > 0:
        inc = np.asarray(incumbent, dtype=float).reshape(1, d)
        local = inc + 0.05 * (hi - lo) * gen.standard_normal((cfg.pool_local, d))
        pool.append(np.clip(local, lo, hi))
    pool = np.vstack(pool)
    scores = np.asarray(marginal_acq(pool), dtype=float)
    scores = np.where(np.isfinite(scores) & (scores > 0.0), scores, 0.0)
    total = scores.sum()
    p = scores / total if total > 0.0 else None
    idx = gen.choice(pool.shape[0], size=n_points, replace=True, p=p)
    return pool[idx]


def _marginal_scorer(spec, model, pending, use_fantasies):
    """Marginal acquisition for start sampling, with pending points fantasized at their mean."""
    scoring_model = model
    if use_fantasies and pending is not None and len(pending):
        mean, _ = model.marginals(pending)
        scoring_model = model.condition(pending, mean, noiseless=False)
    resolved = spec.resolve(model)
    return lambda P: marginal_acquisition(resolved, scoring_model, P)


def _spread_duplicates(starts, lo, hi, gen):
    """Nudge repeated rows inside each query set so the joint covariance is non-singular."""
    out = starts.copy()
    for s in out:
        for j in range(1, s.shape[0]):
            if np.any(np.all(np.abs(s[:j] - s[j]) < 1e-6, axis=-1)):
                s[j] = np.clip(s[j] + 1e-3 * (hi - lo) * gen.standard_normal(s.shape[1]), lo, hi)
    return out


def _incumbent(model: GPModel):
    if model.n == 0:
        return None
    return model.data.inputs[int(np.argmax(model.data.outputs))]


def _select_batch(spec, model, q, cfg, budget, prefix, n_starts, init_seed, score_width=0):
    """One call of the configured solver over ``q`` free points after ``prefix``."""
    d = model.dim
    objective = QuerySetObjective(spec, model, cfg, prefix=prefix, score_width=score_width)
    if cfg.kind == "rs":
        return random_search(objective, q, d, cfg, budget, seed=init_seed)
    lo, hi = cfg.box(d)
    scorer = _marginal_scorer(spec, model, prefix, cfg.fantasize_pending)
    flat = multi_start_init(scorer, n_starts * q, d, init_seed, _incumbent(model), cfg)
    gen = np.random.default_rng(_derived_seed(init_seed, 37))
    starts = _spread_duplicates(flat.reshape(n_starts, q, d), lo, hi, gen)
    return grad_ascend_multistart(objective, starts, cfg, budget)


def _budget_share(cfg: MaximizerConfig, parts: int) -> float:
    if cfg.budget_mode == "evals":
        return max(1, int(cfg.budget) // parts)
    return cfg.budget / parts


def greedy_select(spec: AcquisitionSpec, q: int, model: GPModel, cfg: MaximizerConfig) -> SelectionResult:
    """Grow the query set one point per round by maximizing the joint acquisition.

    Each round gets 1/q of the budget. Already-chosen points enter the joint
    objective directly; when ``cfg.fantasize_pending`` is on they are also
    fantasized at their predictive mean for the start-point sampler so new
    starts avoid them.
    """
    if q < 1:
        raise ConfigError("q must be >= 1")
    t0 = time.perf_counter()
    share = _budget_share(cfg, q)
    chosen = np.zeros((0, model.dim))
    evals = 0
    trace = []
    warning = None
    res = None
    for k in range(q):
        # Step streams and starts vary by round; scoring samples are shared.
        round_seed = _derived_seed(cfg.seed, k, 41)
        res = _select_batch(spec, model, 1, cfg, share, chosen, cfg.starts_for(False), round_seed, score_width=q)
        chosen = np.vstack([chosen, res.X])
        evals += res.evaluations
        trace.append(res.acq_value)
        warning = warning or res.warning
    return SelectionResult(chosen, res.acq_value, evals, time.perf_counter() - t0, warning, tuple(trace))


def joint_select(spec: AcquisitionSpec, q: int, model: GPModel, cfg: MaximizerConfig) -> SelectionResult:
    """Optimize all q points at once with the full budget."""
    if q < 1:
        raise ConfigError("q must be >= 1")
    t0 = time.perf_counter()
    init_seed = _derived_seed(cfg.seed, 0, 41)
    n_starts = cfg.starts_for(q > 1)
    res = _select_batch(spec, model, q, cfg, cfg.budget, None, n_starts, init_seed)
    return replace(res, elapsed_s=time.perf_counter() - t0, trace=(res.acq_value,))


def incremental_greedy_select(
    spec: AcquisitionSpec, q: int, model: GPModel, cfg: MaximizerConfig, n_fantasies: int = 16
) -> SelectionResult:
    """Greedy EI selection through fantasy states and closed-form marginal EI.

    Round one maximizes closed-form EI. ``n_fantasies`` states are then spawned
    with noiseless outcomes drawn at the chosen point; each later round
    maximizes the state-averaged EI (each state using its own incumbent) and
    extends every state with one more fantasized outcome. States are never
    resampled.
    """
    if spec.kind != "EI":
        raise ConfigError("incremental selection is defined for EI only")
    if q < 1 or n_fantasies < 1:
        raise ConfigError("need q >= 1 and n_fantasies >= 1")
    t0 = time.perf_counter()
    spec = spec.resolve(model)
    d = model.dim
    lo, hi = cfg.box(d)
    share = _budget_share(cfg, q)
    states = [model]
    incumbents = np.array([spec.alpha])
    chosen = np.zeros((0, d))
    evals = 0
    trace = []
    warning = None
    for k in range(q):
        round_cfg = replace(cfg, seed=_derived_seed(cfg.seed, k, 43))
        objective = _AveragedEIObjective(states, incumbents)
        if cfg.kind == "rs":
            res = random_search(objective, 1, d, round_cfg, share, seed=round_cfg.seed)
        else:
            n_starts = cfg.starts_for(False)
            starts = multi_start_init(
                lambda P: objective.score(P[:, None, :]), n_starts, d, round_cfg.seed, _incumbent(model), cfg
            )
            res = grad_ascend_multistart(objective, starts, round_cfg, share)
        x = res.X.reshape(1, d)
        chosen = np.vstack([chosen, x])
        evals += res.evaluations
        trace.append(res.acq_value)
        warning = warning or res.warning
        if k == q - 1:
            break
        if len(states) == 1 and k == 0:
            states = states * n_fantasies
            incumbents = np.repeat(incumbents, n_fantasies)
        eps = draw_base_samples(len(states), 1, "deterministic", _derived_seed(cfg.seed, k, 47)).z[:, 0]
        new_states = []
        for i, st in enumerate(states):
            mean, var = st.marginals(x)
            y = float(mean[0] + np.sqrt(max(var[0], 0.0)) * eps[i])
            new_states.append(st.condition(x, np.array([y]), noiseless=True))
            incumbents[i] = max(incumbents[i], y)
        states = new_states
    value = float(np.sum(trace))
    return SelectionResult(chosen, value, evals, time.perf_counter() - t0, warning, tuple(trace))


def select(spec: AcquisitionSpec, q: int, model: GPModel, cfg: MaximizerConfig, mode: str = "greedy", n_fantasies: int = 16):
    """Dispatch on the parallel-selection mode: greedy, joint or incremental."""
    if mode == "greedy":
        return greedy_select(spec, q, model, cfg)
    if mode == "joint":
        return joint_select(spec, q, model, cfg)
    if mode == "incremental":
        return incremental_greedy_select(spec, q, model, cfg, n_fantasies)
    raise ConfigError(f"unknown parallel mode {mode!r}")
