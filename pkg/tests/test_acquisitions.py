import math

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from qacq.acquisitions import (
    AcquisitionSpec,
    discrete_derivative_mc,
    es_concrete_value,
    evaluate,
    expected_improvement,
    hard_es_value,
    hard_pi_value,
    incremental_ei_paths,
    incremental_ei_value,
    kg_value,
    marginal_ei_and_grad,
    marginal_ei_closed_form,
    mc_gradient,
    mc_value,
    normalization_offset,
    utility,
)
from qacq.errors import ConfigError, DegenerateQueryError
from qacq.gp import Dataset, GPModel, Hyperparams, fantasize
from qacq.reparam import draw_base_samples
from qacq.verification import finite_difference_gradient, random_model, relative_error


def prior_model(mu=0.0, var=1.0, d=1, ls=0.3):
    return GPModel(Dataset.empty(d), Hyperparams(np.full(d, ls), var, 1e-3, mu))


# ---------------------------------------------------------------- utilities


def test_ei_row_example():
    u = utility(AcquisitionSpec("EI", alpha=0.0), np.array([[1.0, -1.0]]))
    assert u.values[0] == 1.0
    assert np.array_equal(u.grad_y[0], [1.0, 0.0])


def test_sr_row_example():
    assert utility(AcquisitionSpec("SR"), np.array([[0.3, 0.7]])).values[0] == 0.7


def test_pi_sharp_temperature():
    u = utility(AcquisitionSpec("PI", alpha=0.0, tau=1e-6), np.array([[0.5]]))
    assert u.values[0] == pytest.approx(1.0)


def test_ties_go_to_first_index():
    u = utility(AcquisitionSpec("SR"), np.array([[2.0, 2.0, 1.0]]))
    assert np.array_equal(u.grad_y[0], [1.0, 0.0, 0.0])


def test_nested_kinds_rejected_by_utility():
    spec = AcquisitionSpec("KG", discretization=np.zeros((2, 1)))
    with pytest.raises(ConfigError):
        utility(spec, np.zeros((1, 2)))


def test_spec_validation():
    with pytest.raises(ConfigError):
        AcquisitionSpec("XYZ")
    with pytest.raises(ConfigError):
        AcquisitionSpec("ES")
    with pytest.raises(ConfigError):
        AcquisitionSpec("EI", tau=0.0)


def test_ucb_single_point_identity():
    model = prior_model(0.4, 0.81)
    z = draw_base_samples(2**16, 1, seed=5)
    for beta in (1.0, 2.0, 4.0):
        est = evaluate(AcquisitionSpec("UCB", beta=beta), model, np.array([[0.5]]), z)
        assert abs(est.values - (0.4 + math.sqrt(beta) * 0.9)) < 3 * est.stderr


# ---------------------------------------------------------------- mc value


def test_mc_ei_matches_closed_form(model2d):
    z = draw_base_samples(2**14, 1, seed=1)
    x = np.array([[0.35, 0.6]])
    spec = AcquisitionSpec("EI").resolve(model2d)
    est = evaluate(spec, model2d, x, z)
    assert abs(est.values - marginal_ei_closed_form(x, model2d, spec.alpha)) < 4 * est.stderr


def test_zero_variance_limit():
    X = np.array([[0.2]])
    model = GPModel(Dataset(X, [1.5]), Hyperparams([0.3], 1.0, 0.0, 0.0))
    z = draw_base_samples(256, 1, seed=0)
    assert mc_value(AcquisitionSpec("EI", alpha=1.0), X, model, z) == pytest.approx(0.5, abs=1e-4)


def test_deterministic_mode_repeats(model2d):
    spec = AcquisitionSpec("EI")
    X = np.array([[0.1, 0.2], [0.8, 0.7]])
    a = mc_value(spec, X, model2d, draw_base_samples(128, 2, seed=3))
    b = mc_value(spec, X, model2d, draw_base_samples(128, 2, seed=3))
    assert a == b


def test_value_agrees_across_sample_sizes(model2d, rng):
    for _ in range(5):
        X = rng.random((2, 2))
        spec = AcquisitionSpec("EI")
        a = evaluate(spec, model2d, X, draw_base_samples(4096, 2, seed=1))
        b = evaluate(spec, model2d, X, draw_base_samples(4 * 4096, 2, seed=2))
        assert abs(a.values - b.values) < 3 * math.hypot(a.stderr, b.stderr) + 1e-12


def test_parallel_ucb_dominates_marginals(model2d):
    X = np.array([[0.2, 0.3], [0.7, 0.8]])
    spec = AcquisitionSpec("UCB", beta=2.0)
    joint = evaluate(spec, model2d, X, draw_base_samples(2**15, 2, seed=4))
    for i in range(2):
        single = evaluate(spec, model2d, X[[i]], draw_base_samples(2**15, 1, seed=5))
        assert joint.values >= single.values - 3 * math.hypot(joint.stderr, single.stderr)


def test_batched_matches_single(model2d, rng):
    Xs = rng.random((5, 3, 2))
    z = draw_base_samples(64, 3, seed=2)
    for kind in ("EI", "UCB", "PI", "SR"):
        spec = AcquisitionSpec(kind, tau=0.1)
        batch = evaluate(spec, model2d, Xs, z, grad=True)
        for i in range(5):
            single = evaluate(spec, model2d, Xs[i], z, grad=True)
            assert batch.values[i] == pytest.approx(float(single.values), abs=1e-12)
            assert np.allclose(batch.grad[i], single.grad, atol=1e-12)


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("kind", ["EI", "SR", "UCB", "PI", "ES", "KG"])
def test_gradient_matches_fd(kind, model2d, rng):
    disc = rng.random((5, 2))
    spec = AcquisitionSpec(kind, tau=0.05, discretization=disc)
    z = draw_base_samples(64, 3, seed=8)
    X = rng.random((3, 2))
    g = mc_gradient(spec, X, model2d, z)
    fd = finite_difference_gradient(lambda Y: mc_value(spec, Y, model2d, z), X, 1e-6)
    assert relative_error(g, fd) < 1e-3


def test_es_gradient_small_temperature(model2d, rng):
    spec = AcquisitionSpec("ES", tau=0.01, discretization=rng.random((8, 2)))
    z = draw_base_samples(64, 2, seed=8)
    X = rng.random((2, 2))
    g = mc_gradient(spec, X, model2d, z)
    fd = finite_difference_gradient(lambda Y: mc_value(spec, Y, model2d, z), X, 1e-6)
    assert relative_error(g, fd) < 1e-2


def test_gradient_flat_region_is_zero(model2d):
    spec = AcquisitionSpec("EI", alpha=1e6)
    g = mc_gradient(spec, np.array([[0.3, 0.3], [0.6, 0.1]]), model2d, draw_base_samples(32, 2, seed=0))
    assert np.all(g == 0.0)


def test_duplicate_rows_rejected(model2d):
    with pytest.raises(DegenerateQueryError):
        mc_gradient(AcquisitionSpec("EI"), np.array([[0.3, 0.3], [0.3, 0.3]]), model2d, draw_base_samples(8, 2))


def test_sr_gradient_mirror_symmetry():
    model = prior_model(d=2, ls=0.4)
    # Swapping coordinates keeps all pairwise distances under an isotropic kernel,
    # so the same base samples give the same paths and mirrored gradients.
    X = np.array([[0.2, 0.6], [0.5, 0.9]])
    z = draw_base_samples(256, 2, seed=1).z
    g = mc_gradient(AcquisitionSpec("SR"), X, model, z)
    g_swap = mc_gradient(AcquisitionSpec("SR"), X[:, ::-1], model, z)
    assert np.allclose(g, g_swap[:, ::-1], atol=1e-12)


# ---------------------------------------------------------------- ES / KG


def test_es_single_point_discretization(model2d):
    spec = AcquisitionSpec("ES", discretization=np.array([[0.5, 0.5]]))
    z = draw_base_samples(16, 1, seed=0)
    assert es_concrete_value(spec, np.array([[0.2, 0.2]]), model2d, z, draw_base_samples(8, 1, seed=1)) == pytest.approx(0.0, abs=1e-12)


def test_es_flat_temperature(model2d, rng):
    b = 6
    spec = AcquisitionSpec("ES", tau=1e3, discretization=rng.random((b, 2)))
    v = es_concrete_value(spec, np.array([[0.2, 0.2]]), model2d, draw_base_samples(16, 1), draw_base_samples(16, b))
    assert v == pytest.approx(-math.log(b), abs=1e-3)


def test_concrete_limits_match_hard_versions(model2d, rng):
    X = rng.random((2, 2))
    z = draw_base_samples(512, 2, seed=3)
    alpha = model2d.best_observed
    soft = mc_value(AcquisitionSpec("PI", alpha=alpha, tau=1e-4), X, model2d, z)
    assert abs(soft - hard_pi_value(alpha, model2d, X, z)) < 1e-2
    spec = AcquisitionSpec("ES", tau=1e-4, discretization=rng.random((5, 2)))
    zb = draw_base_samples(64, 5, seed=4)
    soft_es = es_concrete_value(spec, X, model2d, z, zb)
    assert abs(soft_es - hard_es_value(spec, model2d, X, z, zb)) < 1e-2


def test_kg_without_update(model2d, rng):
    disc = rng.random((4, 2))
    spec = AcquisitionSpec("KG", discretization=disc)
    mean, _ = model2d.marginals(disc)
    assert kg_value(spec, rng.random((2, 2)), model2d, np.zeros((10, 2))) == pytest.approx(mean.max())


def test_kg_dominates_current_max(model2d, rng):
    disc = rng.random((4, 2))
    mean, _ = model2d.marginals(disc)
    X = disc[[int(np.argmax(mean))]]
    v = kg_value(AcquisitionSpec("KG", discretization=disc), X, model2d, draw_base_samples(512, 1, seed=0))
    assert v >= mean.max() - 1e-9


def test_kg_against_quadrature():
    X0 = np.array([[0.15], [0.6]])
    model = GPModel(Dataset(X0, [0.3, -0.2]), Hyperparams([0.25], 1.0, 1e-2, 0.0))
    disc = np.array([[0.35], [0.8]])
    xa = np.array([[0.5]])
    P = np.vstack([xa, disc])
    mean, cov = model.batch_moments(P)
    s_a = math.sqrt(cov[0, 0])
    slope = cov[1:, 0] / s_a

    def integrand(zz):
        return np.max(mean[1:] + slope * zz) * norm.pdf(zz)

    nodes = np.linspace(-8, 8, 10_001)
    exact = integrate.trapezoid([integrand(t) for t in nodes], nodes)
    est = evaluate(AcquisitionSpec("KG", discretization=disc), model, xa, draw_base_samples(2**14, 1, seed=6))
    assert abs(est.values - exact) < 3 * est.stderr


# ---------------------------------------------------------------- closed forms and incremental EI


def test_closed_form_examples():
    assert expected_improvement(0.0, 1.0, 0.0) == pytest.approx(1 / math.sqrt(2 * math.pi))
    assert expected_improvement(2.0, 0.0, 0.0) == 2.0
    vals = [float(expected_improvement(-k, 0.1, 0.0)) for k in (0.5, 1.0, 2.0)]
    assert vals[0] > vals[1] > vals[2] >= 0.0 and vals[2] < 1e-50


def test_marginal_ei_gradient(model2d, rng):
    X = rng.random((4, 2))
    alpha = model2d.best_observed
    _, g = marginal_ei_and_grad(X, model2d, alpha)
    for i in range(4):
        fd = finite_difference_gradient(lambda Y: marginal_ei_closed_form(Y, model2d, alpha), X[[i]])
        assert np.allclose(g[i], fd[0], atol=1e-7)


def test_incremental_value_without_fantasies(model2d):
    x = np.array([[0.4, 0.4]])
    alpha = model2d.best_observed
    assert incremental_ei_value(x, [model2d.data], alpha, model2d.hp) == pytest.approx(
        marginal_ei_closed_form(x, model2d, alpha)
    )


def test_incremental_value_threshold_rises(model2d):
    alpha = model2d.best_observed
    y1 = alpha + 0.7
    state = fantasize(model2d.data, np.array([0.9, 0.1]), y1)
    x = np.array([[0.4, 0.4]])
    got = incremental_ei_value(x, [state], alpha, model2d.hp)
    assert got == pytest.approx(marginal_ei_closed_form(x, GPModel(state, model2d.hp), y1))


def test_incremental_value_needs_states(model2d):
    with pytest.raises(ConfigError):
        incremental_ei_value(np.zeros((1, 2)), [], 0.0, model2d.hp)


def test_incremental_paths_match_explicit_refits(model2d, rng):
    X = rng.random((3, 2))
    z = draw_base_samples(5, 3, seed=2).z
    alpha = model2d.best_observed
    fast = incremental_ei_paths(X, model2d, z, alpha)
    mean, cov = model2d.batch_moments(X)
    L = np.linalg.cholesky(cov)
    for k in range(5):
        y = mean + L @ z[k]
        total, state, inc = 0.0, model2d.data, alpha
        for j in range(3):
            total += marginal_ei_closed_form(X[[j]], GPModel(state, model2d.hp), inc)
            state = fantasize(state, X[j], y[j])
            inc = max(inc, y[j])
        assert fast[k] == pytest.approx(total, rel=1e-6, abs=1e-9)


def test_joint_equals_incremental_q2(model2d, rng):
    X = rng.random((2, 2))
    alpha = model2d.best_observed
    joint = evaluate(AcquisitionSpec("EI", alpha=alpha), model2d, X, draw_base_samples(2**16, 2, seed=1))
    inc = incremental_ei_paths(X, model2d, draw_base_samples(2**16, 2, seed=2), alpha)
    se = math.hypot(joint.stderr, inc.std(ddof=1) / math.sqrt(inc.size))
    assert abs(joint.values - inc.mean()) < 4 * se


# ---------------------------------------------------------------- discrete derivative


def test_discrete_derivative_empty_base(model2d):
    spec = AcquisitionSpec("EI")
    x = np.array([[0.3, 0.4]])
    z = draw_base_samples(128, 1, seed=0)
    assert discrete_derivative_mc(spec, x, None, model2d, z) == pytest.approx(mc_value(spec, x, model2d, z))


def test_discrete_derivative_duplicate_is_zero(model2d):
    X_old = np.array([[0.3, 0.4]])
    z = draw_base_samples(64, 1, seed=1).z
    zz = np.hstack([z, z])
    assert discrete_derivative_mc(AcquisitionSpec("EI"), X_old, X_old, model2d, zz) == pytest.approx(0.0, abs=1e-8)


@pytest.mark.parametrize("kind", ["EI", "PI", "UCB", "SR"])
def test_discrete_derivative_telescopes(kind, model2d, rng):
    spec = AcquisitionSpec(kind, tau=0.1)
    X_old = rng.random((2, 2))
    x = rng.random((1, 2))
    z = draw_base_samples(256, 3, seed=4).z
    full = mc_value(spec, np.vstack([X_old, x]), model2d, z)
    part = mc_value(spec, X_old, model2d, z[:, :2])
    assert discrete_derivative_mc(spec, x, X_old, model2d, z) == pytest.approx(full - part, abs=1e-10)


def test_discrete_derivative_rejects_nested(model2d):
    spec = AcquisitionSpec("KG", discretization=np.zeros((2, 2)))
    with pytest.raises(ConfigError):
        discrete_derivative_mc(spec, np.zeros((1, 2)), None, model2d, np.zeros((4, 1)))


# ---------------------------------------------------------------- normalization


def test_normalization_offsets(model2d, rng):
    grid = rng.random((10, 2))
    assert normalization_offset(AcquisitionSpec("EI"), model2d, grid).v_min == 0.0
    assert normalization_offset(AcquisitionSpec("PI"), model2d, grid).v_min == 0.0
    assert normalization_offset(AcquisitionSpec("UCB"), prior_model(d=2), grid).v_min == 0.0
    mean, _ = model2d.marginals(grid)
    assert normalization_offset(AcquisitionSpec("UCB"), model2d, grid).v_min == pytest.approx(mean.min())
    sr = normalization_offset(AcquisitionSpec("SR"), model2d, grid).v_min
    assert sr < mean.min()
