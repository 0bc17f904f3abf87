import itertools

import numpy as np
import pytest
from scipy.special import logsumexp

from proxvi.evaluation import is_marginal_likelihood, log_mean_exp, validation_elbo
from proxvi.params import ParamVector
from proxvi.sbn import sbn_elbo_mc, sbn_layout, sbn_log_joint, sbn_log_weights


def enumerable_sbn(seed=0):
    rng = np.random.default_rng(seed)
    layout = sbn_layout(2, (2,))
    params = ParamVector(rng.normal(size=layout.size), layout)
    return params, np.array([[1.0, 0.0]])


def exact_log_marginal(params, x):
    z = np.array(list(itertools.product((0.0, 1.0), repeat=2)))
    return float(logsumexp(sbn_log_joint(params, [z], np.tile(x, (4, 1)))))


def weights_fn(params):
    return lambda X, S, rng: sbn_log_weights(params, X, S, rng)


def test_log_mean_exp_is_stable():
    w = np.array([700.0, 699.0, 698.0])
    assert np.isfinite(log_mean_exp(w))
    assert log_mean_exp(w) == pytest.approx(np.log(np.mean(np.exp(w - 700))) + 700)
    with pytest.warns(RuntimeWarning):
        assert log_mean_exp(np.full(3, -np.inf)) == -np.inf


def test_is_estimate_within_tolerance_of_enumeration():
    params, x = enumerable_sbn()
    exact = exact_log_marginal(params, x)
    for seed in range(3):
        est = is_marginal_likelihood(weights_fn(params), x, 5000, np.random.default_rng(seed))
        assert abs(est - exact) < 0.05


def test_exact_posterior_proposal_gives_exact_estimate():
    rng = np.random.default_rng(1)
    layout = sbn_layout(3, (1,))
    params = ParamVector(rng.normal(size=layout.size), layout)
    x = np.array([[0.0, 1.0, 1.0]])
    log_p = sbn_log_joint(params, [np.array([[0.0], [1.0]])], np.tile(x, (2, 1)))
    params.view("inf_U1")[:] = 0.0
    params.view("inf_d1")[:] = log_p[1] - log_p[0]
    for S in (1, 7, 100):
        est = is_marginal_likelihood(weights_fn(params), x, S, np.random.default_rng(S))
        assert est == pytest.approx(logsumexp(log_p), abs=1e-12)


def test_single_sample_is_a_single_elbo_draw():
    params, x = enumerable_sbn()
    a = is_marginal_likelihood(weights_fn(params), x, 1, np.random.default_rng(5))
    b = sbn_log_weights(params, x, 1, np.random.default_rng(5))[0, 0]
    assert a == pytest.approx(b, abs=1e-12)


def test_validation_elbo_consistency_and_ordering():
    params, x = enumerable_sbn(2)
    X = np.vstack([x, [[0.0, 1.0]], [[1.0, 1.0]]])
    v = validation_elbo(weights_fn(params), x, 10, np.random.default_rng(3))
    assert v == pytest.approx(sbn_elbo_mc(params, x, 10, np.random.default_rng(3)))
    elbos = np.array([validation_elbo(weights_fn(params), X, 20, np.random.default_rng(s))
                      for s in range(200)])
    iss = np.array([is_marginal_likelihood(weights_fn(params), X, 20, np.random.default_rng(s))
                    for s in range(200)])
    diff = iss - elbos
    assert diff.mean() > -3 * diff.std() / np.sqrt(diff.size)
    per_row = validation_elbo(weights_fn(params), X, 5, np.random.default_rng(0), reduce=False)
    assert per_row.shape == (3,)


def test_deterministic_model_is_seed_independent():
    layout = sbn_layout(2, (2,))
    params = ParamVector(np.zeros(layout.size), layout)
    params.view("inf_d1")[:] = [30.0, -30.0]
    x = np.array([[1.0, 0.0]])
    values = {round(validation_elbo(weights_fn(params), x, 5, np.random.default_rng(s)), 12)
              for s in range(5)}
    assert len(values) == 1


def test_is_estimate_is_monotone_in_samples():
    params, x = enumerable_sbn(3)
    small = np.array([is_marginal_likelihood(weights_fn(params), x, 2, np.random.default_rng(s))
                      for s in range(500)])
    large = np.array([is_marginal_likelihood(weights_fn(params), x, 50,
                                             np.random.default_rng(10**6 + s))
                      for s in range(500)])
    se = np.hypot(small.std(), large.std()) / np.sqrt(500)
    assert large.mean() >= small.mean() - 3 * se


def test_argument_checks():
    params, x = enumerable_sbn()
    with pytest.raises(ValueError):
        is_marginal_likelihood(weights_fn(params), x, 0)
    with pytest.raises(ValueError):
        validation_elbo(weights_fn(params), x, 0)
