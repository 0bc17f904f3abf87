"""Sigmoid belief network with a Bernoulli inference network.

Layers are indexed bottom-up: ``x`` is observed, ``z_1`` sits directly above
it and ``z_L`` is the top layer with a factorized ``Bernoulli(sigmoid(prior))``
prior. The inference network mirrors the generative one:
``q(z_1 | x) q(z_2 | z_1) ... q(z_L | z_{L-1})``.

Gradients in the inference network use the score function with the
leave-one-out control variate; gradients in the generative network are the
usual Monte Carlo average of ``grad log p(x, z)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit, logit
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigurationError
from .optim import GradientEstimate, run_optimizer
from .params import Layout, ParamVector
from .proximity import ProximityConfig, Schedule, eval_statistic, statistic_vjp


def softplus_sigmoid(a):
    """``(log(1 + exp(a)), sigmoid(a))`` from a single exponential."""
    e = np.exp(-np.abs(a))
    softplus = np.maximum(a, 0.0) + np.log1p(e)
    sigmoid = np.where(a >= 0.0, 1.0, e) / (1.0 + e)
    return softplus, sigmoid


def log_bernoulli(v, logits):
    """``log Bernoulli(v; sigmoid(logits))`` elementwise, stable for large logits."""
    e = np.exp(-np.abs(logits))
    return v * logits - (np.maximum(logits, 0.0) + np.log1p(e))


def sbn_layout(n_visible: int, hidden_sizes) -> Layout:
    sizes = [n_visible] + list(hidden_sizes)
    specs = [("prior", "bias", (sizes[-1],))]
    for l in range(1, len(sizes)):
        specs.append((f"gen_W{l}", "unconstrained", (sizes[l - 1], sizes[l])))
        specs.append((f"gen_c{l}", "bias", (sizes[l - 1],)))
    for l in range(1, len(sizes)):
        specs.append((f"inf_U{l}", "unconstrained", (sizes[l], sizes[l - 1])))
        specs.append((f"inf_d{l}", "bias", (sizes[l],)))
    return Layout.build(specs)


def _glorot(rng, rows, cols):
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def init_sbn_params(n_visible: int, hidden_sizes, pi: float = 0.5, init: str = "good",
                    bad_weight: float = -10.0, rng=None) -> ParamVector:
    """Initial parameters.

    ``"good"``: prior logit ``logit(pi)`` and normalized (Glorot) uniform
    generative weights. ``"bad"``: the same prior logit with every generative
    weight set to ``bad_weight``. The inference network always gets Glorot
    weights and zero biases.
    """
    if init not in ("good", "bad"):
        raise ConfigurationError(f"unknown init {init!r}")
    if not 0.0 < pi < 1.0:
        raise ConfigurationError(f"pi must lie in (0, 1), got {pi}")
    rng = check_random_state(rng)
    layout = sbn_layout(n_visible, hidden_sizes)
    params = ParamVector(np.zeros(layout.size), layout)
    params.view("prior")[:] = logit(pi)
    for s in layout.slices:
        if s.name.startswith("gen_W"):
            params.view(s.name)[:] = _glorot(rng, *s.shape) if init == "good" else bad_weight
        elif s.name.startswith("inf_U"):
            params.view(s.name)[:] = _glorot(rng, *s.shape)
    return params


def _n_layers(params: ParamVector) -> int:
    return sum(1 for s in params.layout.slices if s.name.startswith("inf_U"))


def posterior_logits(params: ParamVector, x, zs=None):
    """Inference-network logits for every latent layer.

    Layer 1 depends only on ``x``; higher layers need the sampled layer
    below, taken from ``zs`` (a bottom-up list).
    """
    L = _n_layers(params)
    logits = []
    below = x
    for l in range(1, L + 1):
        a = below @ params.view(f"inf_U{l}").T + params.view(f"inf_d{l}")
        logits.append(a)
        if l < L:
            if zs is None:
                raise ValueError("multi-layer posterior logits need samples")
            below = zs[l - 1]
    return logits


def sample_posterior(params: ParamVector, x, n_samples: int, rng):
    """Draw ``n_samples`` latent paths per row of ``x``.

    Returns ``(zs, logits, log_q)`` with layer arrays of shape
    ``(n_samples, batch, units)`` and ``log_q`` of shape ``(n_samples, batch)``.
    """
    L = _n_layers(params)
    below = np.broadcast_to(x, (n_samples,) + x.shape)
    zs, logits = [], []
    log_q = 0.0
    for l in range(1, L + 1):
        a = below @ params.view(f"inf_U{l}").T + params.view(f"inf_d{l}")
        z = (rng.random(a.shape) < expit(a)).astype(np.float64)
        log_q = log_q + log_bernoulli(z, a).sum(axis=-1)
        zs.append(z)
        logits.append(a)
        below = z
    return zs, logits, log_q


def _generative_forward(params: ParamVector, zs):
    """Per generative layer: ``(logits, softplus(logits), sigmoid(logits))``."""
    out = []
    for l in range(1, len(zs) + 1):
        a = zs[l - 1] @ params.view(f"gen_W{l}").T + params.view(f"gen_c{l}")
        out.append((a,) + softplus_sigmoid(a))
    return out


def sbn_log_joint(params: ParamVector, zs, x, forward=None) -> np.ndarray:
    """``log p(x, z)`` summed over every unit, for bottom-up latent layers ``zs``.

    Broadcasts over any leading axes shared by ``x`` and the layers.
    """
    forward = _generative_forward(params, zs) if forward is None else forward
    total = log_bernoulli(zs[-1], params.view("prior")).sum(axis=-1)
    below = [x] + list(zs)
    for l, (a, softplus, _) in enumerate(forward, start=1):
        total = total + (below[l - 1] * a - softplus).sum(axis=-1)
    return total


def log_q_of(params: ParamVector, zs, x) -> np.ndarray:
    """``log q(z | x)`` for given bottom-up latent layers."""
    L = _n_layers(params)
    inputs = [x] + list(zs[:-1])
    total = 0.0
    for l in range(1, L + 1):
        a = inputs[l - 1] @ params.view(f"inf_U{l}").T + params.view(f"inf_d{l}")
        total = total + log_bernoulli(zs[l - 1], a).sum(axis=-1)
    return total


def _loo_weights(signal: np.ndarray, baseline: bool) -> np.ndarray:
    S = signal.shape[0]
    if not baseline:
        return signal
    others = (signal.sum(axis=0, keepdims=True) - signal) / (S - 1)
    return signal - others


def _flat(a):
    return a.reshape(-1, a.shape[-1])


def _inference_grad(params, zs, logits, x, weights, out):
    """Accumulate ``mean_{s,b} weights * grad log q`` into ``out``."""
    S, B = weights.shape
    inputs = [np.broadcast_to(x, (S,) + x.shape)] + list(zs[:-1])
    for l in range(1, len(zs) + 1):
        delta = _flat((zs[l - 1] - expit(logits[l - 1])) * weights[..., None])
        s_U = params.layout[f"inf_U{l}"]
        s_d = params.layout[f"inf_d{l}"]
        out[s_U.offset : s_U.stop] += (delta.T @ _flat(inputs[l - 1])).ravel() / (S * B)
        out[s_d.offset : s_d.stop] += delta.sum(axis=0) / (S * B)


def _generative_grad(params, zs, x, out, forward=None):
    """Accumulate ``mean_{s,b} grad_theta log p(x, z_s)`` into ``out``."""
    S, B = zs[0].shape[:2]
    forward = _generative_forward(params, zs) if forward is None else forward
    below = [np.broadcast_to(x, (S,) + x.shape)] + list(zs)
    top = zs[-1]
    s_p = params.layout["prior"]
    out[s_p.offset : s_p.stop] += (top - expit(params.view("prior"))).sum(axis=(0, 1)) / (S * B)
    for l, (_, _, sigmoid) in enumerate(forward, start=1):
        delta = _flat(below[l - 1] - sigmoid)
        s_W = params.layout[f"gen_W{l}"]
        s_c = params.layout[f"gen_c{l}"]
        out[s_W.offset : s_W.stop] += (delta.T @ _flat(zs[l - 1])).ravel() / (S * B)
        out[s_c.offset : s_c.stop] += delta.sum(axis=0) / (S * B)


@dataclass
class ScoreGradient:
    elbo: float
    grad: np.ndarray
    entropy_grad: np.ndarray
    log_weights: np.ndarray
    zs: list
    logits: list


def score_gradient_loo(params: ParamVector, x, n_samples: int, rng, baseline: bool = True,
                       entropy: bool = True) -> ScoreGradient:
    """Score-function ELBO gradient with the leave-one-out control variate.

    The learning signal of sample ``s`` is ``log p(x, z_s) - log q(z_s | x)``
    and its baseline is the mean signal of the other samples. ``grad`` covers
    both networks; ``entropy_grad`` is the same estimator applied to the
    entropy term alone (signal ``-log q``). Everything is averaged over the
    batch.
    """
    if n_samples < 2:
        raise ConfigurationError("leave-one-out baseline needs at least 2 samples")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    zs, logits, log_q = sample_posterior(params, x, n_samples, rng)
    forward = _generative_forward(params, zs)
    log_p = sbn_log_joint(params, zs, x, forward)
    log_w = log_p - log_q
    grad = np.zeros_like(params.values)
    _inference_grad(params, zs, logits, x, _loo_weights(log_w, baseline), grad)
    _generative_grad(params, zs, x, grad, forward)
    ent_grad = np.zeros_like(params.values)
    if entropy:
        _inference_grad(params, zs, logits, x, _loo_weights(-log_q, baseline), ent_grad)
    return ScoreGradient(float(log_w.mean()), grad, ent_grad, log_w, zs, logits)


def sbn_elbo_mc(params: ParamVector, x, n_samples: int, rng) -> float:
    """Monte Carlo ELBO, averaged over samples and rows of ``x``."""
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    return float(sbn_log_weights(params, x, n_samples, rng).mean())


def sbn_log_weights(params: ParamVector, x, n_samples: int, rng) -> np.ndarray:
    """Importance log-weights ``log p(x, z_s) - log q(z_s | x)``, shape (S, batch)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    zs, _, log_q = sample_posterior(params, x, n_samples, rng)
    return sbn_log_joint(params, zs, x) - log_q


def amortized_statistic(name: str, params_template: ParamVector, x, zs, pi: float):
    """Statistic of the posterior the inference network assigns to a batch.

    The per-datapoint statistic is averaged over the batch (and over sampled
    paths for layers above the first). Returns a ``params -> (value, vjp)``
    callable whose vjp is routed back into the inference-network weights.
    """
    L = _n_layers(params_template)
    S = zs[0].shape[0] if L > 1 else 1
    B = x.shape[0]
    rows = S * B
    x_rows = np.tile(x, (S, 1)) if L > 1 else x
    inputs = [x_rows] + [z.reshape(rows, -1) for z in zs[:-1]]
    sizes = [params_template.layout[f"inf_d{l}"].shape[0] for l in range(1, L + 1)]
    stat_layout = Layout.build([(f"q{l}", "bernoulli-logit", (rows, sizes[l - 1]), pi)
                                for l in range(1, L + 1)])

    def statistic(params: ParamVector):
        blocks = [inputs[l - 1] @ params.view(f"inf_U{l}").T + params.view(f"inf_d{l}")
                  for l in range(1, L + 1)]
        q_params = ParamVector(np.concatenate([b.ravel() for b in blocks]), stat_layout)
        value = eval_statistic(name, q_params, batched=True)

        def vjp(cotangent):
            g = statistic_vjp(name, q_params, cotangent, batched=True)
            out = np.zeros_like(params.values)
            for l in range(1, L + 1):
                gl = g[stat_layout[f"q{l}"].offset : stat_layout[f"q{l}"].stop].reshape(rows, -1)
                s_U = params.layout[f"inf_U{l}"]
                s_d = params.layout[f"inf_d{l}"]
                out[s_U.offset : s_U.stop] = (gl.T @ inputs[l - 1]).ravel()
                out[s_d.offset : s_d.stop] = gl.sum(axis=0)
            return out

        return value, vjp

    return statistic


def _batch_entropy(logits) -> float:
    """Mean per-datapoint entropy of the first-layer posterior factors."""
    a = logits[0]
    lam = expit(a)
    ent = np.logaddexp(0.0, a) - a * lam
    return float(ent.sum(axis=-1).mean())


class SigmoidBeliefNet(TransformerMixin, BaseEstimator):
    """Sigmoid belief network trained by black-box VI, annealing or fast PVI.

    Parameters
    ----------
    hidden_sizes : tuple of int
        Latent layer widths, bottom-up.
    prior : float
        Initial top-layer Bernoulli probability (the prior logit is learned).
    init : {"good", "bad"}
        ``"bad"`` sets every generative weight to ``bad_weight``.
    method : {"vi", "pvi-fast", "annealing"}
    statistic : {"entropy", "kl", "mean-variance"}
        Proximity statistic of the amortized posterior, for ``pvi-fast``.
    k0 : float or "auto"
        Constraint magnitude (or initial temperature for annealing);
        ``"auto"`` is the absolute ELBO of the first batch at initialization.
    n_samples : int
        Latent samples per datapoint for the leave-one-out estimator.
    """

    def __init__(self, hidden_sizes=(20,), prior=0.5, init="good", bad_weight=-10.0,
                 method="vi", statistic="entropy", distance="inverse-huber", k0="auto",
                 gamma=1e-5, schedule="exponential", ema_alpha=0.9999, step_size=1e-3,
                 n_iter=20000, batch_size=20, n_samples=5, log_every=100, random_state=None):
        self.hidden_sizes = hidden_sizes
        self.prior = prior
        self.init = init
        self.bad_weight = bad_weight
        self.method = method
        self.statistic = statistic
        self.distance = distance
        self.k0 = k0
        self.gamma = gamma
        self.schedule = schedule
        self.ema_alpha = ema_alpha
        self.step_size = step_size
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.n_samples = n_samples
        self.log_every = log_every
        self.random_state = random_state

    def _objective(self, X, seed):
        N = X.shape[0]
        pi = self.prior
        use_stat = self.method == "pvi-fast"
        n_batches = max(N // self.batch_size, 1)
        order_cache = {}

        def batch_indices(t):
            epoch, pos = divmod(t, n_batches)
            if epoch not in order_cache:
                order_cache.clear()
                order_cache[epoch] = np.random.default_rng([seed, 1, epoch]).permutation(N)
            return order_cache[epoch][pos * self.batch_size : (pos + 1) * self.batch_size]

        def objective(params: ParamVector, t: int) -> GradientEstimate:
            x = X[batch_indices(t)]
            rng = np.random.default_rng([seed, 2, t])
            est = score_gradient_loo(params, x, self.n_samples, rng,
                                     entropy=self.method == "annealing")
            stat = amortized_statistic(self.statistic, params, x, est.zs, pi) if use_stat else None
            return GradientEstimate(est.elbo, est.grad, _batch_entropy(est.logits),
                                    est.entropy_grad, stat)

        return objective

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if self.method not in ("vi", "pvi-fast", "annealing"):
            raise ConfigurationError(f"method {self.method!r} is not supported for the SBN")
        if self.method == "pvi-fast" and self.statistic not in ("entropy", "kl", "mean-variance"):
            raise ConfigurationError(
                f"statistic {self.statistic!r} is not defined for the SBN posterior"
            )
        rng = check_random_state(self.random_state)
        init_seed, run_seed = rng.randint(2**31 - 1, size=2)
        params = init_sbn_params(X.shape[1], self.hidden_sizes, self.prior, self.init,
                                 self.bad_weight, np.random.RandomState(init_seed))
        objective = self._objective(X, int(run_seed))
        self.initial_elbo_ = objective(params, 0).elbo
        schedule = Schedule(self.schedule, self.gamma, self.n_iter)
        magnitude = abs(self.initial_elbo_) if self.k0 == "auto" else float(self.k0)
        proximity = None
        temperature0 = 1.0
        if self.method == "pvi-fast":
            proximity = ProximityConfig(self.statistic, self.distance, magnitude, schedule,
                                        self.ema_alpha)
        elif self.method == "annealing":
            temperature0 = max(1.0, magnitude)
        self.k0_ = magnitude
        result = run_optimizer(params, objective, self.n_iter, method=self.method,
                               proximity=proximity, step_size=self.step_size, adam=True,
                               temperature0=temperature0, annealing_schedule=schedule,
                               log_every=self.log_every)
        self.params_ = result.params
        self.history_ = result.rows
        self.n_features_in_ = X.shape[1]
        return self

    def log_importance_weights(self, X, n_samples, rng):
        check_is_fitted(self, "params_")
        return sbn_log_weights(self.params_, X, n_samples, rng)

    def transform(self, X):
        """Posterior probabilities of the first latent layer."""
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return expit(X @ self.params_.view("inf_U1").T + self.params_.view("inf_d1"))

    def score(self, X, y=None, n_samples=10, seed=0):
        """Mean per-datapoint Monte Carlo ELBO with a fixed evaluation seed."""
        from .evaluation import validation_elbo

        X = check_array(X, dtype=np.float64)
        return validation_elbo(self, X, n_samples, np.random.default_rng(seed))
