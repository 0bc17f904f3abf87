"""Held-out estimators: Monte Carlo ELBO and importance-sampled log marginal likelihood.

Both work with any fitted model exposing
``log_importance_weights(X, n_samples, rng) -> array (n_samples, n_rows)``
holding ``log p(x, z_s) - log q(z_s | x)`` for ``z_s ~ q(z | x)``, or with
that callable itself.
"""

import warnings

import numpy as np
from scipy.special import logsumexp


def log_mean_exp(log_w, axis=0):
    """``log(mean(exp(log_w)))`` along ``axis`` without overflow."""
    log_w = np.asarray(log_w, dtype=np.float64)
    n = log_w.shape[axis]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = logsumexp(log_w, axis=axis) - np.log(n)
    out = np.where(np.all(np.isneginf(log_w), axis=axis), -np.inf, out)
    if np.any(np.isneginf(out)):
        warnings.warn("all importance weights are zero for some rows", RuntimeWarning)
    return out


def _weights_fn(model):
    return getattr(model, "log_importance_weights", model)


def _chunked_log_weights(model, X, n_samples, rng, chunk):
    weights = _weights_fn(model)
    parts = []
    remaining = n_samples
    while remaining > 0:
        s = min(chunk, remaining)
        parts.append(weights(X, s, rng))
        remaining -= s
    return np.concatenate(parts, axis=0)


def is_marginal_likelihood(model, X, n_samples=5000, rng=None, chunk=500, reduce=True):
    """Importance-sampled ``log p(x)`` using the model's posterior as proposal.

    Returns the mean over rows of ``X`` (``reduce=True``) or the per-row
    estimates.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(rng)
    X = np.atleast_2d(X)
    estimates = []
    for start in range(0, X.shape[0], 100):
        log_w = _chunked_log_weights(model, X[start : start + 100], n_samples, rng, chunk)
        estimates.append(log_mean_exp(log_w, axis=0))
    per_row = np.concatenate(estimates)
    return float(per_row.mean()) if reduce else per_row


def validation_elbo(model, X, n_samples=10, rng=None, reduce=True):
    """Mean per-datapoint Monte Carlo ELBO."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(rng)
    X = np.atleast_2d(X)
    weights = _weights_fn(model)
    per_row = np.concatenate([
        weights(X[start : start + 100], n_samples, rng).mean(axis=0)
        for start in range(0, X.shape[0], 100)
    ])
    return float(per_row.mean()) if reduce else per_row
