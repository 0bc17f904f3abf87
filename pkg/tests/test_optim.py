import numpy as np
import pytest
from scipy.special import expit

from proxvi.data import synth_factor_data
from proxvi.exceptions import ConfigurationError, DivergenceError
from proxvi.factor import FactorModel, analytic_elbo, elbo_gradients, expected_log_joint
from proxvi.optim import (
    AdamMoments,
    GradientEstimate,
    adam_transform,
    annealing_step,
    annealing_temperature,
    euclidean_step,
    fast_pvi_step,
    init_anchor,
    make_state,
    pvi_inner_step,
    run_optimizer,
)
from proxvi.params import ParamVector
from proxvi.proximity import ProximityConfig, Schedule, distance, eval_statistic

from conftest import central_diff, rel_err


def vec(values, kind="unconstrained"):
    return ParamVector.from_arrays([("x", kind, np.asarray(values, dtype=float))])


def const_config(statistic, k, distance_name="squared-difference", alpha=0.9999, T=100):
    return ProximityConfig(statistic, distance_name, k, Schedule("constant", 1.0, T), alpha)


# -- Euclidean and Adam -------------------------------------------------------

def test_euclidean_examples():
    s = make_state(vec([1.0]), 0.1, 10, adam=False)
    assert euclidean_step(s, np.zeros(1)).params.values[0] == 1.0
    assert euclidean_step(s, np.array([2.0])).params.values[0] == pytest.approx(1.2)


def test_euclidean_contracts_on_quadratic():
    s = make_state(vec([3.0]), 0.1, 50, adam=False)
    for t in range(50):
        prev = s.params.values[0]
        s = euclidean_step(s, -s.params.values)
        assert s.params.values[0] == pytest.approx(0.9 * prev, rel=1e-14)
    assert s.t == 50
    with pytest.raises(ConfigurationError):
        euclidean_step(s, np.zeros(1))


def test_euclidean_rejects_bad_gradients():
    s = make_state(vec([1.0]), 0.1, 10, adam=False)
    with pytest.raises(DivergenceError):
        euclidean_step(s, np.array([np.nan]))
    with pytest.raises(ConfigurationError):
        euclidean_step(s, np.zeros(2))
    with pytest.raises(ConfigurationError):
        make_state(vec([1.0]), 0.0, 10)


def test_adam_examples():
    m = AdamMoments.zeros(1)
    update, m1 = adam_transform(m, np.array([1.0]), 0.01)
    assert update[0] == pytest.approx(0.01 / (1 + 1e-8), rel=1e-12)
    assert m1.count == 1
    zero, _ = adam_transform(AdamMoments.zeros(3), np.zeros(3), 0.5)
    np.testing.assert_array_equal(zero, 0.0)
    m = AdamMoments.zeros(1)
    for _ in range(2000):
        update, m = adam_transform(m, np.array([-3.0]), 0.02)
    assert update[0] == pytest.approx(-0.02, rel=1e-6)


# -- fast PVI -----------------------------------------------------------------

@pytest.mark.parametrize("statistic", ["identity", "entropy", "kl", "mean-variance"])
@pytest.mark.parametrize("adam", [False, True])
def test_fast_pvi_with_zero_magnitude_is_bitwise_vi(statistic, adam, rng):
    p = ParamVector.from_arrays([("x", "bernoulli-logit", rng.normal(size=5), 0.3)])
    cfg = const_config(statistic, 0.0)
    a = make_state(p, 0.05, 20, adam=adam)
    b = make_state(p, 0.05, 20, adam=adam, anchor=init_anchor(cfg, p) + 1.0)
    for _ in range(20):
        g = rng.normal(size=5)
        a = euclidean_step(a, g)
        b, _ = fast_pvi_step(b, cfg, g)
        assert np.array_equal(a.params.values, b.params.values)


def test_fast_pvi_at_anchor_equals_euclidean(rng):
    p = vec(rng.normal(size=4), "bernoulli-logit")
    for statistic in ("identity", "entropy", "mean-variance"):
        cfg = const_config(statistic, 7.0)
        s = make_state(p, 0.1, 5, adam=False, anchor=init_anchor(cfg, p))
        g = rng.normal(size=4)
        new, report = fast_pvi_step(s, cfg, g)
        np.testing.assert_allclose(new.params.values, euclidean_step(s, g).params.values)
        assert report.constraint_value == 0.0


def test_fast_pvi_hand_example():
    cfg = const_config("identity", 1.0)
    s = make_state(vec([1.0]), 0.1, 5, adam=False, anchor=np.array([0.0]))
    new, report = fast_pvi_step(s, cfg, np.zeros(1))
    assert new.params.values[0] == pytest.approx(0.9)
    assert report.k_t == 1.0
    assert report.constraint_value == pytest.approx(0.5)


def test_fast_pvi_anchor_tracks_ema_in_statistic_space(rng):
    p = vec(rng.normal(size=3), "bernoulli-logit")
    cfg = const_config("entropy", 1.0, alpha=0.5)
    anchor0 = init_anchor(cfg, p)
    s = make_state(p, 0.1, 5, adam=False, anchor=anchor0)
    new, _ = fast_pvi_step(s, cfg, rng.normal(size=3))
    expected = 0.5 * anchor0 + 0.5 * eval_statistic("entropy", new.params)
    np.testing.assert_allclose(new.anchor, expected)


def test_fast_pvi_requires_anchor():
    with pytest.raises(ConfigurationError):
        fast_pvi_step(make_state(vec([0.0]), 0.1, 5), const_config("identity", 1.0), np.zeros(1))


def test_init_anchor_examples():
    p = vec(np.zeros(5), "bernoulli-logit")
    np.testing.assert_array_equal(init_anchor(const_config("identity", 1.0), p), p.values)
    assert init_anchor(const_config("entropy", 1.0), p)[0] == pytest.approx(5 * np.log(2))
    Q, _ = np.linalg.qr(np.random.default_rng(1).normal(size=(3, 3)))
    W = ParamVector.from_arrays([("W", "weight-matrix", Q)])
    np.testing.assert_allclose(init_anchor(const_config("orthogonal", 1.0), W),
                               np.eye(3).ravel(), atol=1e-12)


# -- inner-loop PVI -------------------------------------------------------------

def test_inner_with_zero_magnitude_is_euclidean(rng):
    p = vec(rng.normal(size=4))
    cfg = const_config("identity", 0.0)
    s = make_state(p, 0.1, 5, adam=False, anchor=p.values.copy())
    g = rng.normal(size=4)
    new, report = pvi_inner_step(s, cfg, g, 0.0, rng, inner_iters=200, tol=1e-12)
    np.testing.assert_allclose(new.params.values, p.values + 0.1 * g, atol=1e-10)


@pytest.mark.parametrize("k", [0.5, 2.0, 8.0])
def test_inner_closed_form_shrinkage(k, rng):
    rho = 0.1
    p = vec(rng.normal(size=6))
    cfg = const_config("identity", k)
    s = make_state(p, rho, 5, adam=False, anchor=p.values.copy())
    g = rng.normal(size=6)
    new, report = pvi_inner_step(s, cfg, g, 0.0, rng, inner_iters=500, tol=1e-13)
    np.testing.assert_allclose(new.params.values - p.values, rho / (1 + rho * k) * g, atol=1e-6)


def test_inner_reaches_stationarity_on_quadratic(rng):
    # L(x) = -(x - 2)^2 / 2, one parameter; the inner objective is a concave quadratic.
    p = vec([0.5])
    cfg = const_config("identity", 3.0)
    s = make_state(p, 0.1, 5, adam=False, anchor=np.array([0.0]))
    g = -(p.values - 2.0)
    new, report = pvi_inner_step(s, cfg, g, 1e-2, rng, inner_iters=200, tol=1e-12)
    assert report.grad_norm < 1e-8


def test_inner_divergence_is_reported(rng):
    cfg = const_config("identity", 50.0)
    s = make_state(vec([0.0]), 1.0, 5, adam=False, anchor=np.array([0.0]))
    with pytest.raises(DivergenceError):
        pvi_inner_step(s, cfg, np.ones(1), 0.0, rng, inner_iters=200, divergence_bound=1e3)


# -- annealing ------------------------------------------------------------------

def test_annealing_temperature_schedule():
    s = Schedule("exponential", 1e-3, 100)
    assert annealing_temperature(50.0, s, 0) == 50.0
    assert annealing_temperature(50.0, s, 100) == 1.0
    assert 1.0 < annealing_temperature(50.0, s, 99) < 50.0
    assert annealing_temperature(1.0, s, 10) == 1.0


def test_annealing_step_examples(rng):
    p = vec(rng.normal(size=3))
    s = make_state(p, 0.1, 5, adam=False)
    g_lp, g_h = rng.normal(size=3), rng.normal(size=3)
    np.testing.assert_array_equal(annealing_step(s, 1.0, g_lp, g_h).params.values,
                                  euclidean_step(s, g_lp + g_h).params.values)
    with pytest.raises(ConfigurationError):
        annealing_step(s, 0.5, g_lp, g_h)
    # single Bernoulli with flat log joint: lambda = 0.5 stays put at any temperature
    b = vec([0.0], "bernoulli-logit")
    g_h = -b.values * expit(b.values) * (1 - expit(b.values))
    out = annealing_step(make_state(b, 0.1, 5, adam=False), 2.0, np.zeros(1), g_h)
    assert out.params.values[0] == 0.0


def test_tempered_gradient_matches_finite_differences(rng):
    for _ in range(5):
        mu = rng.normal(size=(2, 3))
        model = FactorModel(0.3, mu)
        X = rng.normal(size=(4, 3))
        logits = rng.uniform(-3, 3, size=(4, 2))
        temperature = rng.uniform(1, 5)

        def tempered(flat):
            lam = expit(flat.reshape(4, 2))
            elbo = analytic_elbo(model, lam, X)
            elp = expected_log_joint(model, lam, X)
            return elp + temperature * (elbo - elp)

        g, _, g_h = elbo_gradients(model, logits, X)
        analytic = g + (temperature - 1.0) * g_h
        assert rel_err(analytic.ravel(), central_diff(tempered, logits.ravel())) < 1e-5


# -- properties on the factor model ----------------------------------------------

def factor_problem(seed=0):
    truth = np.array([[2.0, 2.0], [-2.0, 2.0]])
    X, _ = synth_factor_data(truth, 0.5, 1.0, 30, np.random.default_rng(seed))
    model = FactorModel(0.5, truth + 1.5)
    return model, X


def factor_objective(model, X):
    def objective(p, t):
        logits = p.view("z")
        g, _, g_h = elbo_gradients(model, logits, X)
        lam = expit(logits)
        return GradientEstimate(analytic_elbo(model, lam, X), g.ravel(),
                                eval_statistic("entropy", p)[0], g_h.ravel())
    return objective


def test_proximity_objective_does_not_decrease_after_exact_inner_solve():
    model, X = factor_problem()
    p = ParamVector.from_arrays([("z", "bernoulli-logit", np.zeros((30, 2)), 0.5)])
    cfg = ProximityConfig("entropy", "squared-difference", 5.0, Schedule("constant", 1.0, 20), 1.0)
    s = make_state(p, 0.01, 20, adam=False, anchor=init_anchor(cfg, p) - 2.0)
    objective = factor_objective(model, X)

    def l_prox(params):
        return (objective(params, 0).elbo
                - 5.0 * distance("squared-difference", s.anchor, eval_statistic("entropy", params)))

    rng = np.random.default_rng(0)
    for _ in range(20):
        before = l_prox(s.params)
        s, report = pvi_inner_step(s, cfg, objective(s.params, s.t).grad, 0.0, rng,
                                   inner_iters=500, tol=1e-10, inner_step_size=0.005)
        assert l_prox(s.params) >= before - 1e-10


def test_entropy_constraint_limits_per_step_entropy_change():
    model, X = factor_problem()
    p = ParamVector.from_arrays([("z", "bernoulli-logit", np.zeros((30, 2)), 0.5)])
    objective = factor_objective(model, X)

    def max_entropy_change(k0):
        cfg = ProximityConfig("entropy", "inverse-huber", k0, Schedule("constant", 1.0, 200))
        entropies = [eval_statistic("entropy", p)[0]]
        run_optimizer(p, objective, 200, method="pvi-fast", proximity=cfg, step_size=0.01,
                      adam=False,
                      callback=lambda t, s, r: entropies.append(eval_statistic("entropy", s.params)[0]))
        return np.max(np.abs(np.diff(entropies)))

    assert max_entropy_change(100.0) < max_entropy_change(0.0)


def test_run_optimizer_rows_and_determinism():
    model, X = factor_problem()
    p = ParamVector.from_arrays([("z", "bernoulli-logit", np.zeros((30, 2)), 0.5)])
    objective = factor_objective(model, X)
    cfg = ProximityConfig("entropy", "inverse-huber", 10.0, Schedule("exponential", 1e-3, 250))
    a = run_optimizer(p, objective, 250, method="pvi-fast", proximity=cfg, step_size=0.05,
                      log_every=100)
    b = run_optimizer(p, objective, 250, method="pvi-fast", proximity=cfg, step_size=0.05,
                      log_every=100)
    assert [r["t"] for r in a.rows] == [0, 100, 200, 249]
    assert set(a.rows[0]) == {"t", "elbo", "constraint_value", "k_t", "entropy", "grad_norm",
                              "wall_time"}
    assert np.array_equal(a.params.values, b.params.values)
    assert a.rows[-1]["elbo"] > a.rows[0]["elbo"]


def test_run_optimizer_methods_and_errors():
    model, X = factor_problem()
    p = ParamVector.from_arrays([("z", "bernoulli-logit", np.zeros((30, 2)), 0.5)])
    objective = factor_objective(model, X)
    annealed = run_optimizer(p, objective, 50, method="annealing", temperature0=20.0,
                             annealing_schedule=Schedule("exponential", 1e-3, 50), log_every=10)
    assert annealed.rows[0]["k_t"] == 20.0
    cfg = const_config("entropy", 1.0, T=30)
    inner = run_optimizer(p, objective, 30, method="pvi-inner", proximity=cfg, step_size=0.01,
                          adam=False, inner_iters=20)
    assert np.all(np.isfinite(inner.params.values))
    with pytest.raises(ConfigurationError):
        run_optimizer(p, objective, 5, method="newton")
    with pytest.raises(ConfigurationError):
        run_optimizer(p, objective, 5, method="pvi-fast")
    with pytest.raises(ConfigurationError):
        run_optimizer(p, objective, 5, method="pvi-inner", proximity=cfg, adam=True)

    def bad(params, t):
        return GradientEstimate(float("nan"), np.zeros(len(params)))

    with pytest.raises(DivergenceError):
        run_optimizer(p, bad, 5)
