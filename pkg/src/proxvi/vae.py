"""Small Gaussian-latent variational autoencoder with hand-written backprop.

Encoder: two rectifier layers, then linear heads for the latent mean and
log-stddev. Decoder: two rectifier layers, then Bernoulli logits per pixel.
Weight matrices are stored ``(out, in)`` so the orthogonal statistic
``W W^T`` is ``out x out``; only encoder weights are tagged ``weight-matrix``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigurationError, DivergenceError
from .optim import GradientEstimate, run_optimizer
from .params import Layout, ParamVector
from .proximity import ProximityConfig, Schedule
from .sbn import log_bernoulli

LOG_STD_CLAMP = 10.0
ENCODER_WEIGHTS = ("enc_W1", "enc_W2", "enc_Wmu", "enc_Wsig")


def orthogonal_init(rows: int, cols: int, rng=None) -> np.ndarray:
    """Random matrix with orthonormal rows (rows <= cols) or columns (rows > cols).

    QR of a Gaussian matrix with the sign of R's diagonal folded back in, so
    the result is Haar distributed.
    """
    if rows < 1 or cols < 1:
        raise ConfigurationError("orthogonal_init needs positive dimensions")
    rng = check_random_state(rng)
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return q.T if rows <= cols else q


def vae_layout(n_visible: int, hidden: int, latent: int) -> Layout:
    return Layout.build([
        ("enc_W1", "weight-matrix", (hidden, n_visible)),
        ("enc_b1", "bias", (hidden,)),
        ("enc_W2", "weight-matrix", (hidden, hidden)),
        ("enc_b2", "bias", (hidden,)),
        ("enc_Wmu", "weight-matrix", (latent, hidden)),
        ("enc_bmu", "bias", (latent,)),
        ("enc_Wsig", "weight-matrix", (latent, hidden)),
        ("enc_bsig", "bias", (latent,)),
        ("dec_V1", "unconstrained", (hidden, latent)),
        ("dec_c1", "bias", (hidden,)),
        ("dec_V2", "unconstrained", (hidden, hidden)),
        ("dec_c2", "bias", (hidden,)),
        ("dec_V3", "unconstrained", (n_visible, hidden)),
        ("dec_c3", "bias", (n_visible,)),
    ])


def init_vae_params(n_visible: int, hidden: int, latent: int, rng=None) -> ParamVector:
    """Orthogonal encoder weights, Glorot-uniform decoder weights, zero biases."""
    rng = check_random_state(rng)
    layout = vae_layout(n_visible, hidden, latent)
    params = ParamVector(np.zeros(layout.size), layout)
    for name in ENCODER_WEIGHTS:
        params.view(name)[:] = orthogonal_init(*layout[name].shape, rng=rng)
    for name in ("dec_V1", "dec_V2", "dec_V3"):
        rows, cols = layout[name].shape
        limit = np.sqrt(6.0 / (rows + cols))
        params.view(name)[:] = rng.uniform(-limit, limit, size=(rows, cols))
    return params


def encode(params: ParamVector, x):
    """Return ``(mu, log_std, cache)``; ``log_std`` is clamped to +-10."""
    p = params.view
    pre1 = x @ p("enc_W1").T + p("enc_b1")
    h1 = np.maximum(pre1, 0.0)
    pre2 = h1 @ p("enc_W2").T + p("enc_b2")
    h2 = np.maximum(pre2, 0.0)
    mu = h2 @ p("enc_Wmu").T + p("enc_bmu")
    raw = h2 @ p("enc_Wsig").T + p("enc_bsig")
    log_std = np.clip(raw, -LOG_STD_CLAMP, LOG_STD_CLAMP)
    return mu, log_std, (x, pre1, h1, pre2, h2, raw)


def decode(params: ParamVector, z):
    p = params.view
    pre1 = z @ p("dec_V1").T + p("dec_c1")
    g1 = np.maximum(pre1, 0.0)
    pre2 = g1 @ p("dec_V2").T + p("dec_c2")
    g2 = np.maximum(pre2, 0.0)
    logits = g2 @ p("dec_V3").T + p("dec_c3")
    return logits, (z, pre1, g1, pre2, g2)


def log_bernoulli_sum(x, logits):
    return np.sum(log_bernoulli(x, logits), axis=-1)


def gaussian_kl(mu, log_std):
    """``KL(N(mu, sigma^2) || N(0, I))`` summed over the last axis."""
    return 0.5 * np.sum(mu**2 + np.exp(2.0 * log_std) - 1.0 - 2.0 * log_std, axis=-1)


@dataclass
class VAEGradient:
    elbo: float
    grad: np.ndarray
    reconstruction: float
    kl: float


def vae_elbo_grad(params: ParamVector, x, eps) -> VAEGradient:
    """Single-sample reparameterized ELBO (batch mean) and its exact gradient.

    ``eps`` is the standard normal noise, shape ``(batch, latent)``; fixing it
    makes the estimate a deterministic function of ``params``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B = x.shape[0]
    p = params.view
    mu, log_std, (_, e_pre1, h1, e_pre2, h2, raw) = encode(params, x)
    std = np.exp(log_std)
    z = mu + std * eps
    logits, (_, d_pre1, g1, d_pre2, g2) = decode(params, z)
    recon = log_bernoulli_sum(x, logits)
    kl = gaussian_kl(mu, log_std)
    elbo = float(np.mean(recon - kl))
    if not np.isfinite(elbo):
        layer = "decoder" if not np.all(np.isfinite(logits)) else "encoder"
        raise DivergenceError(f"non-finite ELBO; first non-finite activations in the {layer}")

    grad = ParamVector(np.zeros_like(params.values), params.layout)
    g = grad.view
    # decoder
    d_logits = (x - expit(logits)) / B
    g("dec_V3")[:] = d_logits.T @ g2
    g("dec_c3")[:] = d_logits.sum(axis=0)
    d_pre2 = (d_logits @ p("dec_V3")) * (d_pre2 > 0)
    g("dec_V2")[:] = d_pre2.T @ g1
    g("dec_c2")[:] = d_pre2.sum(axis=0)
    d_pre1 = (d_pre2 @ p("dec_V2")) * (d_pre1 > 0)
    g("dec_V1")[:] = d_pre1.T @ z
    g("dec_c1")[:] = d_pre1.sum(axis=0)
    d_z = d_pre1 @ p("dec_V1")
    # reparameterization and KL
    d_mu = d_z - mu / B
    d_log_std = d_z * eps * std - (std**2 - 1.0) / B
    d_raw = d_log_std * (np.abs(raw) < LOG_STD_CLAMP)
    # encoder
    g("enc_Wmu")[:] = d_mu.T @ h2
    g("enc_bmu")[:] = d_mu.sum(axis=0)
    g("enc_Wsig")[:] = d_raw.T @ h2
    g("enc_bsig")[:] = d_raw.sum(axis=0)
    d_h2 = d_mu @ p("enc_Wmu") + d_raw @ p("enc_Wsig")
    d_epre2 = d_h2 * (e_pre2 > 0)
    g("enc_W2")[:] = d_epre2.T @ h1
    g("enc_b2")[:] = d_epre2.sum(axis=0)
    d_epre1 = (d_epre2 @ p("enc_W2")) * (e_pre1 > 0)
    g("enc_W1")[:] = d_epre1.T @ x
    g("enc_b1")[:] = d_epre1.sum(axis=0)
    return VAEGradient(elbo, grad.values, float(np.mean(recon)), float(np.mean(kl)))


def vae_log_weights(params: ParamVector, x, n_samples: int, rng) -> np.ndarray:
    """``log p(x | z) + log p(z) - log q(z | x)`` for ``n_samples`` draws, shape (S, batch)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mu, log_std, _ = encode(params, x)
    eps = rng.standard_normal((n_samples,) + mu.shape)
    z = mu + np.exp(log_std) * eps
    logits, _ = decode(params, z)
    log_px = log_bernoulli_sum(x, logits)
    log_pz = -0.5 * np.sum(z**2 + np.log(2.0 * np.pi), axis=-1)
    log_qz = -0.5 * np.sum(eps**2 + np.log(2.0 * np.pi) + 2.0 * log_std, axis=-1)
    return log_px + log_pz - log_qz


def gram_deviation(params: ParamVector, anchor) -> float:
    """Largest absolute entry of the stacked encoder Gram matrices minus ``anchor``."""
    grams = np.concatenate([(params.view(n) @ params.view(n).T).ravel() for n in ENCODER_WEIGHTS])
    return float(np.max(np.abs(grams - anchor)))


class VariationalAutoencoder(TransformerMixin, BaseEstimator):
    """Bernoulli-pixel VAE trained by VI or fast PVI with the orthogonal statistic.

    ``anchor="ema"`` tracks the encoder Gram matrices with an exponential
    moving average; ``anchor="identity"`` pins them to the identity. The
    magnitude ``k0`` is held constant; ``"auto"`` uses the absolute ELBO of
    the first batch at initialization.
    """

    def __init__(self, hidden=64, latent=8, method="vi", k0=1.0, distance="inverse-huber",
                 ema_alpha=0.9999, anchor="ema", step_size=1e-3, n_iter=5000, batch_size=20,
                 log_every=100, random_state=None):
        self.hidden = hidden
        self.latent = latent
        self.method = method
        self.k0 = k0
        self.distance = distance
        self.ema_alpha = ema_alpha
        self.anchor = anchor
        self.step_size = step_size
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.log_every = log_every
        self.random_state = random_state

    def fit(self, X, y=None, callback=None):
        X = check_array(X, dtype=np.float64)
        if self.method not in ("vi", "pvi-fast"):
            raise ConfigurationError(f"method {self.method!r} is not supported for the VAE")
        if self.anchor not in ("ema", "identity"):
            raise ConfigurationError(f"unknown anchor mode {self.anchor!r}")
        rng = check_random_state(self.random_state)
        init_seed, run_seed = rng.randint(2**31 - 1, size=2)
        params = init_vae_params(X.shape[1], self.hidden, self.latent,
                                 np.random.RandomState(init_seed))
        N = X.shape[0]
        n_batches = max(N // self.batch_size, 1)
        seed = int(run_seed)
        orders = {}

        def objective(p: ParamVector, t: int) -> GradientEstimate:
            epoch, pos = divmod(t, n_batches)
            if epoch not in orders:
                orders.clear()
                orders[epoch] = np.random.default_rng([seed, 1, epoch]).permutation(N)
            x = X[orders[epoch][pos * self.batch_size : (pos + 1) * self.batch_size]]
            eps = np.random.default_rng([seed, 2, t]).standard_normal((x.shape[0], self.latent))
            est = vae_elbo_grad(p, x, eps)
            return GradientEstimate(est.elbo, est.grad)

        self.initial_elbo_ = objective(params, 0).elbo
        self.k0_ = abs(self.initial_elbo_) if self.k0 == "auto" else float(self.k0)
        proximity = None
        anchor0 = None
        if self.method == "pvi-fast":
            alpha = 1.0 if self.anchor == "identity" else self.ema_alpha
            proximity = ProximityConfig("orthogonal", self.distance, self.k0_,
                                        Schedule("constant", 1.0, self.n_iter), alpha)
            if self.anchor == "identity":
                anchor0 = np.concatenate([np.eye(params.layout[n].shape[0]).ravel()
                                          for n in ENCODER_WEIGHTS])
        result = run_optimizer(params, objective, self.n_iter, method=self.method,
                               proximity=proximity, step_size=self.step_size, adam=True,
                               anchor0=anchor0, log_every=self.log_every, callback=callback)
        self.params_ = result.params
        self.history_ = result.rows
        self.n_features_in_ = X.shape[1]
        return self

    def log_importance_weights(self, X, n_samples, rng):
        check_is_fitted(self, "params_")
        return vae_log_weights(self.params_, X, n_samples, rng)

    def transform(self, X):
        """Posterior means of the latent code."""
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return encode(self.params_, X)[0]

    def score(self, X, y=None, n_samples=10, seed=0):
        """Mean per-datapoint Monte Carlo ELBO with a fixed evaluation seed."""
        from .evaluation import validation_elbo

        X = check_array(X, dtype=np.float64)
        return validation_elbo(self, X, n_samples, np.random.default_rng(seed))
