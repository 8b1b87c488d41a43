import math

import numpy as np
import pytest

from qacq.acquisitions import AcquisitionSpec, evaluate, marginal_acquisition
from qacq.errors import ConfigError
from qacq.gp import Dataset, GPModel, Hyperparams
from qacq.maximizers import (
    MaximizerConfig,
    QuerySetObjective,
    _derived_seed,
    grad_ascend_multistart,
    greedy_select,
    incremental_greedy_select,
    joint_select,
    multi_start_init,
    random_search,
)
from qacq.reparam import draw_base_samples
from qacq.verification import greedy_vs_exhaustive, random_model


class Quadratic:
    """f(X) = -||X - c||^2 with exact gradients."""

    def __init__(self, center):
        self.c = np.asarray(center, dtype=float)

    def value_grad(self, X, step):
        diff = X - self.c
        return -np.sum(diff**2, axis=(1, 2)), -2.0 * diff

    def score(self, X):
        return -np.sum((np.asarray(X) - self.c) ** 2, axis=(1, 2))


class Flat:
    def value_grad(self, X, step):
        return np.zeros(X.shape[0]), np.zeros_like(X)

    def score(self, X):
        return np.full(np.asarray(X).shape[0], 3.0)


class Grid1d:
    """Bumpy 1-d objective for random-search checks."""

    def score(self, X):
        x = np.asarray(X)[:, 0, 0]
        return np.sin(7 * x) * np.exp(-x) + 0.3 * x


@pytest.fixture
def ei_model():
    gen = np.random.default_rng(5)
    X = gen.random((6, 1))
    y = np.sin(6 * X[:, 0])
    return GPModel(Dataset(X, y), Hyperparams([0.2], 1.0, 1e-3, 0.0))


def test_config_validation():
    with pytest.raises(ConfigError):
        MaximizerConfig(kind="lbfgs")
    with pytest.raises(ConfigError):
        MaximizerConfig(step_size=0.0)
    with pytest.raises(ConfigError):
        MaximizerConfig(budget=0)
    with pytest.raises(ConfigError):
        MaximizerConfig(n_starts=0)
    assert MaximizerConfig(kind="grad_ascent").kind == "grad"
    assert MaximizerConfig(kind="random_search").kind == "rs"


def test_adam_converges_on_quadratic():
    c = np.array([[0.62, 0.31]])
    cfg = MaximizerConfig(budget=501, n_starts=1)
    res = grad_ascend_multistart(Quadratic(c), np.array([[[0.2, 0.8]]]), cfg)
    assert np.max(np.abs(res.X - c)) < 1e-3
    assert res.evaluations == 501


def test_plateau_returns_start():
    start = np.array([[[0.3, 0.4]]])
    res = grad_ascend_multistart(Flat(), start, MaximizerConfig(budget=50, n_starts=1))
    assert np.array_equal(res.X, start[0])


def test_tiny_budget_warns():
    start = np.array([[[0.3]], [[0.6]]])
    res = grad_ascend_multistart(Quadratic([[0.9]]), start, MaximizerConfig(budget=2))
    assert res.warning is not None
    assert np.array_equal(res.X, start[1])


def test_projection_keeps_bounds():
    res = grad_ascend_multistart(Quadratic([[2.0, -1.0]]), np.array([[[0.5, 0.5]]]), MaximizerConfig(budget=300, n_starts=1))
    assert np.allclose(res.X, [[1.0, 0.0]])


def test_random_search_single_batch_is_argmax():
    cfg = MaximizerConfig(kind="rs", budget=16, seed=2)
    res = random_search(Grid1d(), 1, 1, cfg)
    gen = np.random.default_rng(_derived_seed(2, 23))
    batch = gen.random((16, 1, 1))
    assert np.array_equal(res.X, batch[int(np.argmax(Grid1d().score(batch)))])
    assert res.evaluations == 16


def test_random_search_constant_objective():
    res = random_search(Flat(), 2, 3, MaximizerConfig(kind="rs", budget=10))
    assert res.acq_value == 3.0 and np.all((res.X >= 0) & (res.X <= 1))


def test_random_search_large_budget_near_grid_optimum():
    grid = np.linspace(0, 1, 10_001)[:, None, None]
    best = Grid1d().score(grid).max()
    res = random_search(Grid1d(), 1, 1, MaximizerConfig(kind="rs", budget=4096))
    assert res.acq_value >= best - 0.05


def test_init_uniform_scores_cover_pool():
    cfg = MaximizerConfig(pool_local=0)
    starts = multi_start_init(lambda P: np.ones(len(P)), 4000, 1, seed=1, cfg=cfg)
    hist, _ = np.histogram(starts[:, 0], bins=4, range=(0, 1))
    assert hist.min() > 800


def test_init_single_positive_point():
    cfg = MaximizerConfig(pool_local=0)
    target = {}

    def acq(P):
        s = np.zeros(len(P))
        s[17] = 1.0
        target["x"] = P[17]
        return s

    starts = multi_start_init(acq, 32, 2, seed=0, cfg=cfg)
    assert np.all(starts == target["x"])


def test_init_nonpositive_scores_fall_back_to_uniform():
    starts = multi_start_init(lambda P: -np.ones(len(P)), 64, 2, seed=0)
    assert len(np.unique(starts, axis=0)) > 50


def test_init_concentrates_on_dominant_peak():
    # Low observations everywhere except a gap between two high ones near 0.7.
    X = np.r_[np.linspace(0.0, 0.55, 12), [0.62, 0.78], np.linspace(0.85, 1.0, 4)][:, None]
    y = np.where(np.isin(X[:, 0], [0.62, 0.78]), 1.0, -1.0)
    model = GPModel(Dataset(X, y), Hyperparams([0.08], 1.0, 1e-4, 0.0))
    spec = AcquisitionSpec("EI")
    scorer = lambda P: marginal_acquisition(spec, model, P)
    starts = multi_start_init(scorer, 200, 1, seed=3, incumbent=X[12], cfg=MaximizerConfig())
    grid = np.linspace(0, 1, 2001)[:, None]
    ei = scorer(grid)
    peak = grid[np.argmax(ei), 0]
    # basin: the connected region around the peak where EI stays above its local minima
    order = np.argmax(ei)
    lo = order
    while lo > 0 and ei[lo - 1] <= ei[lo]:
        lo -= 1
    hi = order
    while hi < len(ei) - 1 and ei[hi + 1] <= ei[hi]:
        hi += 1
    inside = (starts[:, 0] >= grid[lo, 0]) & (starts[:, 0] <= grid[hi, 0])
    assert 0.62 < peak < 0.78
    assert inside.mean() >= 0.8


def test_greedy_q1_matches_joint(ei_model):
    cfg = MaximizerConfig(budget=256, seed=4)
    spec = AcquisitionSpec("EI")
    g = greedy_select(spec, 1, ei_model, cfg)
    j = joint_select(spec, 1, ei_model, cfg)
    assert np.array_equal(g.X, j.X) and g.acq_value == j.acq_value


def test_greedy_rejects_bad_q(ei_model):
    with pytest.raises(ConfigError):
        greedy_select(AcquisitionSpec("EI"), 0, ei_model, MaximizerConfig())


@pytest.mark.parametrize("kind", ["EI", "PI", "UCB", "SR"])
def test_greedy_trace_monotone(kind, ei_model):
    res = greedy_select(AcquisitionSpec(kind, tau=0.05), 3, ei_model, MaximizerConfig(budget=384, seed=1))
    assert len(res.X) == 3
    assert all(b >= a for a, b in zip(res.trace, res.trace[1:]))


def test_greedy_picks_both_isolated_peaks():
    values = np.zeros((2, 10))
    values[0, 2] = 1.0
    values[1, 7] = 1.0
    greedy, best, chosen = greedy_vs_exhaustive(values, 2)
    assert sorted(chosen) == [2, 7]
    assert greedy == best == 1.0


def test_greedy_separates_points_on_two_peak_surface():
    X = np.array([[0.05], [0.5], [0.95]])
    y = np.array([-1.0, -1.0, -1.0])
    model = GPModel(Dataset(X, y), Hyperparams([0.1], 1.0, 1e-4, 0.0))
    res = greedy_select(AcquisitionSpec("EI"), 2, model, MaximizerConfig(budget=1024, seed=0))
    xs = np.sort(res.X[:, 0])
    assert xs[0] < 0.5 < xs[1]


def test_joint_reproducible(ei_model):
    cfg = MaximizerConfig(budget=256, seed=9)
    a = joint_select(AcquisitionSpec("EI"), 2, ei_model, cfg)
    b = joint_select(AcquisitionSpec("EI"), 2, ei_model, cfg)
    assert np.array_equal(a.X, b.X) and a.acq_value == b.acq_value and a.evaluations == b.evaluations


def test_joint_near_grid_optimum(ei_model):
    spec = AcquisitionSpec("EI")
    cfg = MaximizerConfig(budget=8192, seed=0)
    res = joint_select(spec, 2, ei_model, cfg)
    obj = QuerySetObjective(spec, ei_model, cfg)
    g = np.linspace(0, 1, 81)
    pairs = np.array([[[a], [b]] for a in g for b in g if a < b])
    best = obj.score(pairs).max()
    assert res.acq_value >= best - 0.05 * abs(best)


def test_incremental_mechanics(ei_model):
    spec = AcquisitionSpec("EI")
    res = incremental_greedy_select(spec, 3, ei_model, MaximizerConfig(budget=300, seed=1), n_fantasies=16)
    assert res.X.shape == (3, 1)
    assert len(res.trace) == 3


def test_incremental_single_fantasy(ei_model):
    res = incremental_greedy_select(AcquisitionSpec("EI"), 4, ei_model, MaximizerConfig(budget=200), n_fantasies=1)
    assert res.X.shape == (4, 1)


def test_incremental_rejects_other_kinds(ei_model):
    with pytest.raises(ConfigError):
        incremental_greedy_select(AcquisitionSpec("UCB"), 2, ei_model, MaximizerConfig())


def test_incremental_matches_joint_on_easy_posterior():
    X = np.array([[0.2], [0.8]])
    model = GPModel(Dataset(X, [0.0, 0.2]), Hyperparams([0.3], 1.0, 1e-3, 0.0))
    spec = AcquisitionSpec("EI")
    cfg = MaximizerConfig(budget=2048, seed=2)
    inc = incremental_greedy_select(spec, 2, model, cfg, n_fantasies=64)
    joint = joint_select(spec, 2, model, cfg)
    z = draw_base_samples(2**16, 2, seed=11)
    a = evaluate(spec, model, inc.X, z)
    b = evaluate(spec, model, joint.X, z)
    assert a.values >= b.values - 4 * math.hypot(a.stderr, b.stderr)


def test_seconds_budget_compliance(ei_model):
    cfg = MaximizerConfig(budget=0.3, budget_mode="seconds", seed=0)
    for fn in (greedy_select, joint_select):
        res = fn(AcquisitionSpec("EI"), 2, ei_model, cfg)
        assert res.elapsed_s <= 1.1 * 0.3 + 0.05
    rs = joint_select(AcquisitionSpec("EI"), 2, ei_model, MaximizerConfig(kind="rs", budget=0.3, budget_mode="seconds"))
    assert rs.elapsed_s <= 1.1 * 0.3 + 0.05


def test_evals_budget_respected(ei_model):
    for kind in ("grad", "rs"):
        res = joint_select(AcquisitionSpec("EI"), 2, ei_model, MaximizerConfig(kind=kind, budget=500))
        assert res.evaluations <= 500
