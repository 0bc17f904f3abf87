"""Bernoulli factor model with a mean-field Bernoulli posterior.

Generative process: ``z_ik ~ Bernoulli(pi)`` and
``x_i ~ Normal(sum_k z_ik mu_k, sigma2 * I)``. The posterior is
``q(z_ik = 1) = lambda_ik``, stored as logits.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import entr, expit, logit
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigurationError
from .optim import GradientEstimate, euclidean_step, make_state, run_optimizer
from .params import ParamVector
from .proximity import ProximityConfig, Schedule

LOGIT_CLIP = 50.0


@dataclass(frozen=True)
class FactorModel:
    pi: float
    mu: np.ndarray
    sigma2: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.pi < 1.0:
            raise ConfigurationError(f"pi must lie in (0, 1), got {self.pi}")
        if not self.sigma2 > 0.0:
            raise ConfigurationError(f"sigma2 must be positive, got {self.sigma2}")
        object.__setattr__(self, "mu", np.atleast_2d(np.asarray(self.mu, dtype=np.float64)))

    @property
    def K(self) -> int:
        return self.mu.shape[0]

    @property
    def D(self) -> int:
        return self.mu.shape[1]


def _gauss_const(model: FactorModel, N: int) -> float:
    return -0.5 * N * model.D * np.log(2.0 * np.pi * model.sigma2)


def expected_log_joint(model: FactorModel, lam, X) -> float:
    """``E_q[log p(x, z)]`` in closed form."""
    lam = np.asarray(lam, dtype=np.float64)
    resid = X - lam @ model.mu
    sq_norms = np.sum(model.mu**2, axis=1)
    quad = np.sum(resid**2) + np.sum(lam * (1.0 - lam) * sq_norms)
    lik = _gauss_const(model, X.shape[0]) - 0.5 * quad / model.sigma2
    prior = np.sum(lam) * np.log(model.pi) + np.sum(1.0 - lam) * np.log1p(-model.pi)
    return float(lik + prior)


def analytic_elbo(model: FactorModel, lam, X) -> float:
    """Closed-form ELBO for posterior probabilities ``lam`` (N x K)."""
    lam = np.asarray(lam, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if lam.shape != (X.shape[0], model.K) or X.shape[1] != model.D:
        raise ConfigurationError("lam must be N x K and X must be N x D")
    entropy = np.sum(entr(lam) + entr(1.0 - lam))
    return expected_log_joint(model, lam, X) + float(entropy)


def elbo_gradients(model: FactorModel, logits, X):
    """Gradients of the ELBO in the posterior logits and in ``mu``.

    Returns ``(grad_logits, grad_mu, grad_entropy_logits)``; the last is the
    gradient of the entropy term alone, which is already part of
    ``grad_logits``.
    """
    lam = expit(logits)
    slope = lam * (1.0 - lam)
    resid = X - lam @ model.mu
    sq_norms = np.sum(model.mu**2, axis=1)
    d_lam_joint = ((resid @ model.mu.T) - 0.5 * (1.0 - 2.0 * lam) * sq_norms) / model.sigma2
    d_lam_joint = d_lam_joint + logit(model.pi)
    grad_entropy = -logits * slope
    grad_logits = d_lam_joint * slope + grad_entropy
    return grad_logits, mu_gradient(model, lam, X), grad_entropy


def coordinate_update_z(model: FactorModel, lam, X, i: int, k: int) -> float:
    """Exact mean-field optimum of ``q(z_ik = 1)`` holding every other factor fixed.

    Includes the prior log-odds, which the bare likelihood form leaves out.
    """
    lam = np.asarray(lam, dtype=np.float64)
    return float(expit(_coordinate_logit(model, lam, np.asarray(X, dtype=np.float64)[i], i, k)))


def _coordinate_logit(model, lam, x_i, i, k):
    others = lam[i] @ model.mu - lam[i, k] * model.mu[k]
    mu_k = model.mu[k]
    return logit(model.pi) + (mu_k @ (x_i - others) - 0.5 * mu_k @ mu_k) / model.sigma2


def coordinate_sweep(model: FactorModel, logits, X) -> np.ndarray:
    """One pass of exact coordinate updates over all ``k``, vectorized over ``i``."""
    logits = np.array(logits, dtype=np.float64)
    lam = expit(logits)
    for k in range(model.K):
        others = lam @ model.mu - np.outer(lam[:, k], model.mu[k])
        mu_k = model.mu[k]
        new = logit(model.pi) + ((X - others) @ mu_k - 0.5 * mu_k @ mu_k) / model.sigma2
        logits[:, k] = np.clip(new, -LOGIT_CLIP, LOGIT_CLIP)
        lam[:, k] = expit(logits[:, k])
    return logits


def mu_gradient(model: FactorModel, lam, X) -> np.ndarray:
    """Gradient of the ELBO in the feature means, K x D."""
    lam = np.asarray(lam, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    fitted = lam @ model.mu
    grad = np.empty_like(model.mu)
    for k in range(model.K):
        others = fitted - np.outer(lam[:, k], model.mu[k])
        terms = -X * lam[:, [k]] + lam[:, [k]] * model.mu[k] + lam[:, [k]] * others
        grad[k] = -terms.sum(axis=0) / model.sigma2
    return grad


def ring_init(truth, radius: float, run_index: int, n_runs: int, rng=None,
              jitter: float = 0.0) -> np.ndarray:
    """Place an initialization on a ring of ``radius`` around ``truth``.

    Every row of ``truth`` is shifted by the same offset. For D = 2 the offset
    is at angle ``2 pi run_index / n_runs`` (plus uniform jitter of half-width
    ``jitter`` radians); other D use a random direction. ``rng`` may be a
    seed, a ``RandomState`` or a ``Generator``.
    """
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    D = truth.shape[1]
    if not isinstance(rng, np.random.Generator):
        rng = check_random_state(rng)
    if D == 2:
        angle = 2.0 * np.pi * run_index / n_runs
        if jitter:
            angle += rng.uniform(-jitter, jitter)
        u = np.array([np.cos(angle), np.sin(angle)])
    else:
        u = rng.normal(size=D)
        u /= np.linalg.norm(u)
    return truth + radius * u


def permutation_rmse(estimate, truth) -> float:
    """RMSE between feature means under the best matching of components."""
    estimate = np.atleast_2d(estimate)
    truth = np.atleast_2d(truth)
    best = np.inf
    for perm in itertools.permutations(range(truth.shape[0])):
        err = np.sqrt(np.mean((estimate[list(perm)] - truth) ** 2))
        best = min(best, err)
    return float(best)


def factor_layout_params(logits, mu, pi) -> ParamVector:
    return ParamVector.from_arrays([
        ("logits", "bernoulli-logit", logits, pi),
        ("mu", "unconstrained", mu),
    ])


def variational_em_run(model: FactorModel, X, method: str = "vi", proximity=None,
                       n_iter: int = 2000, step_size: float = 0.05, adam: bool = True,
                       lambda_update: str = "gradient", init_logits=None,
                       temperature0: float = 1.0, annealing_schedule=None,
                       noise_std: float = 1e-2, inner_iters: int = 50,
                       rng=None, log_every: int = 100, callback=None):
    """Fit posterior logits and feature means jointly by (proximal) gradient ascent.

    ``lambda_update="coordinate"`` replaces the logit gradient step with an
    exact coordinate sweep before every mean update; it is only defined for
    plain VI since the sweep would bypass a constraint on the posterior.

    Returns ``(model_with_fitted_mu, logits, OptimizeResult)``.
    """
    X = np.asarray(X, dtype=np.float64)
    N = X.shape[0]
    logits0 = np.zeros((N, model.K)) if init_logits is None else np.asarray(init_logits, float)
    params = factor_layout_params(logits0, model.mu, model.pi)

    def unpack(p: ParamVector):
        return p.view("logits"), replace(model, mu=p.view("mu").copy())

    def objective(p: ParamVector, t: int) -> GradientEstimate:
        logits, m = unpack(p)
        lam = expit(logits)
        g_logits, g_mu, g_ent = elbo_gradients(m, logits, X)
        grad = np.concatenate([g_logits.ravel(), g_mu.ravel()])
        ent_grad = np.concatenate([g_ent.ravel(), np.zeros(g_mu.size)])
        entropy = float(np.sum(entr(lam) + entr(1.0 - lam)))
        return GradientEstimate(analytic_elbo(m, lam, X), grad, entropy, ent_grad)

    if lambda_update == "gradient":
        result = run_optimizer(params, objective, n_iter, method=method, proximity=proximity,
                               step_size=step_size, adam=adam, temperature0=temperature0,
                               annealing_schedule=annealing_schedule, noise_std=noise_std,
                               inner_iters=inner_iters, rng=rng, log_every=log_every,
                               callback=callback)
    elif lambda_update == "coordinate":
        if method != "vi":
            raise ConfigurationError("coordinate updates of the posterior are only defined for vi")
        result = _coordinate_em(params, model, X, n_iter, step_size, adam, log_every, callback)
    else:
        raise ConfigurationError(f"unknown lambda_update {lambda_update!r}")
    logits, fitted = unpack(result.params)
    return fitted, logits.copy(), result


def _coordinate_em(params, model, X, n_iter, step_size, adam, log_every, callback):
    from .optim import OptimizeResult, StepReport

    state = make_state(params, step_size, n_iter, adam=adam)
    rows = []
    n_logits = X.shape[0] * model.K
    for t in range(n_iter):
        m = replace(model, mu=state.params.view("mu").copy())
        logits = coordinate_sweep(m, state.params.view("logits"), X)
        values = state.params.values.copy()
        values[:n_logits] = logits.ravel()
        state = replace(state, params=state.params.replace(values))
        lam = expit(logits)
        grad = np.zeros_like(values)
        grad[n_logits:] = mu_gradient(m, lam, X).ravel()
        elbo = analytic_elbo(m, lam, X)
        state = euclidean_step(state, grad)
        report = StepReport(elbo, float(np.linalg.norm(grad)), 0.0, 0.0,
                            float(np.sum(entr(lam) + entr(1.0 - lam))))
        if callback is not None:
            callback(t, state, report)
        if t % log_every == 0 or t == n_iter - 1:
            rows.append({"t": t, "elbo": elbo, "constraint_value": 0.0, "k_t": 0.0,
                         "entropy": report.entropy, "grad_norm": report.grad_norm,
                         "wall_time": 0.0})
    return OptimizeResult(state.params, state, rows)


class BernoulliFactorVI(TransformerMixin, BaseEstimator):
    """Variational EM for the Bernoulli factor model.

    ``fit`` learns the feature means ``components_`` together with the
    training posterior; ``transform`` returns posterior feature probabilities
    for new rows by coordinate ascent with the means held fixed.

    Parameters
    ----------
    n_components : int
        Number of binary features K.
    prior : float
        Bernoulli prior probability ``pi`` (fixed, not learned).
    method : {"vi", "pvi-fast", "pvi-inner", "annealing"}
    statistic, distance : str
        Proximity statistic and distance used by the PVI methods.
    k0 : float or "auto"
        Constraint magnitude; ``"auto"`` uses the absolute initial ELBO.
    gamma : float
        Exponential decay rate of the magnitude (and annealing temperature).
    init_means : array of shape (K, D), optional
        Starting feature means; random normal draws otherwise.
    log_every : int
        Interval between recorded rows of ``history_``.
    """

    def __init__(self, n_components=2, prior=0.5, sigma2=1.0, method="vi", statistic="entropy",
                 distance="inverse-huber", k0="auto", gamma=1e-5, schedule="exponential",
                 ema_alpha=0.9999, step_size=0.05, n_iter=2000, adam=True,
                 lambda_update="gradient", noise_std=1e-2, inner_iters=50, init_means=None,
                 log_every=100, random_state=None):
        self.n_components = n_components
        self.prior = prior
        self.sigma2 = sigma2
        self.method = method
        self.statistic = statistic
        self.distance = distance
        self.k0 = k0
        self.gamma = gamma
        self.schedule = schedule
        self.ema_alpha = ema_alpha
        self.step_size = step_size
        self.n_iter = n_iter
        self.adam = adam
        self.lambda_update = lambda_update
        self.noise_std = noise_std
        self.inner_iters = inner_iters
        self.init_means = init_means
        self.log_every = log_every
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        rng = check_random_state(self.random_state)
        if self.init_means is None:
            mu0 = rng.normal(size=(self.n_components, X.shape[1]))
        else:
            mu0 = check_array(self.init_means, dtype=np.float64)
            if mu0.shape != (self.n_components, X.shape[1]):
                raise ConfigurationError("init_means must have shape (n_components, n_features)")
        model = FactorModel(self.prior, mu0, self.sigma2)
        initial_elbo = analytic_elbo(model, np.full((X.shape[0], self.n_components), 0.5), X)
        self.initial_elbo_ = initial_elbo
        schedule = Schedule(self.schedule, self.gamma, self.n_iter)
        proximity = None
        if self.method in ("pvi-fast", "pvi-inner"):
            k0 = abs(initial_elbo) if self.k0 == "auto" else float(self.k0)
            proximity = ProximityConfig(self.statistic, self.distance, k0, schedule, self.ema_alpha)
            self.k0_ = k0
        temperature0 = 1.0
        if self.method == "annealing":
            temperature0 = max(1.0, abs(initial_elbo)) if self.k0 == "auto" else float(self.k0)
            self.temperature0_ = temperature0
        seed = rng.randint(2**31 - 1)
        fitted, logits, result = variational_em_run(
            model, X, method=self.method, proximity=proximity, n_iter=self.n_iter,
            step_size=self.step_size, adam=self.adam and self.method != "pvi-inner",
            lambda_update=self.lambda_update, temperature0=temperature0,
            annealing_schedule=schedule, noise_std=self.noise_std,
            inner_iters=self.inner_iters, rng=np.random.default_rng(seed),
            log_every=self.log_every)
        self.components_ = fitted.mu
        self.posterior_ = expit(logits)
        self.elbo_ = analytic_elbo(fitted, self.posterior_, X)
        self.history_ = result.rows
        self.n_features_in_ = X.shape[1]
        return self

    def _model(self):
        return FactorModel(self.prior, self.components_, self.sigma2)

    def transform(self, X, n_sweeps=50):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        logits = np.zeros((X.shape[0], self.n_components))
        model = self._model()
        for _ in range(n_sweeps):
            logits = coordinate_sweep(model, logits, X)
        return expit(logits)

    def score(self, X, y=None):
        """Mean per-row ELBO of ``X`` under the fitted means."""
        X = check_array(X, dtype=np.float64)
        lam = self.transform(X)
        return analytic_elbo(self._model(), lam, X) / X.shape[0]
