"""Proximity statistics, distances, magnitude schedules and the EMA anchor.

A proximity constraint is ``k_t * d(anchor, f(params))`` where ``f`` is one of
the statistics below, ``d`` one of the distances and ``k_t`` the scheduled
magnitude. Everything here is a pure function of its inputs.

Statistics read parameters through their :class:`~proxvi.params.Layout`:

* Bernoulli factors are stored as logits.
* Gaussian factors are stored as a mean slice and a log-stddev slice; every
  statistic used here is separable across the two, so they need not be paired.
* ``weight-matrix`` slices feed the orthogonal statistic; biases and
  ``unconstrained`` slices are invisible to every statistic except identity.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .exceptions import ConfigurationError
from .params import DISTRIBUTION_KINDS, ParamVector

STATISTICS = ("identity", "entropy", "kl", "mean-variance", "orthogonal")
DISTANCES = ("squared-difference", "inverse-huber")
SCHEDULES = ("constant", "exponential", "linear")

_HALF_LOG_2PIE = 0.5 * np.log(2.0 * np.pi * np.e)


@dataclass(frozen=True)
class Schedule:
    """Decay of the constraint magnitude over ``T`` iterations."""

    kind: str = "constant"
    gamma: float = 1.0
    T: int = 1

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ConfigurationError(f"unknown schedule {self.kind!r}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError(f"decay rate must lie in (0, 1], got {self.gamma}")
        if self.T < 1:
            raise ConfigurationError(f"T must be positive, got {self.T}")


@dataclass(frozen=True)
class ProximityConfig:
    statistic: str = "entropy"
    distance: str = "inverse-huber"
    k0: float = 0.0
    schedule: Schedule = field(default_factory=Schedule)
    ema_alpha: float = 0.9999

    def __post_init__(self):
        if self.statistic not in STATISTICS:
            raise ConfigurationError(f"unknown statistic {self.statistic!r}")
        if self.distance not in DISTANCES:
            raise ConfigurationError(f"unknown distance {self.distance!r}")
        if not self.k0 >= 0.0:
            raise ConfigurationError(f"k0 must be nonnegative, got {self.k0}")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ConfigurationError(f"ema_alpha must lie in [0, 1], got {self.ema_alpha}")


def _check_shapes(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ConfigurationError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def ema_update(anchor, current, alpha: float):
    """Return ``alpha * anchor + (1 - alpha) * current``."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    if isinstance(anchor, ParamVector):
        return anchor.replace(ema_update(anchor.values, current.values, alpha))
    anchor, current = _check_shapes(anchor, current)
    return alpha * anchor + (1.0 - alpha) * current


# -- distances ---------------------------------------------------------------


def squared_difference(x, y) -> float:
    """Half the squared Euclidean distance, so the gradient in ``y`` is ``y - x``."""
    x, y = _check_shapes(x, y)
    diff = y - x
    return 0.5 * float(np.sum(diff * diff))


def inverse_huber(x, y) -> float:
    """Coordinatewise inverse Huber distance, summed.

    Linear (``|u|``) inside the unit interval and ``0.5 u**2 + 0.5`` outside,
    which keeps both value and slope continuous at ``|u| = 1``.
    """
    x, y = _check_shapes(x, y)
    u = np.abs(y - x)
    return float(np.sum(np.where(u < 1.0, u, 0.5 * u * u + 0.5)))


def distance(name: str, x, y) -> float:
    if name == "squared-difference":
        return squared_difference(x, y)
    if name == "inverse-huber":
        return inverse_huber(x, y)
    raise ConfigurationError(f"unknown distance {name!r}")


def distance_grad(name: str, x, y) -> np.ndarray:
    """Gradient of the distance with respect to its second argument."""
    x, y = _check_shapes(x, y)
    diff = y - x
    if name == "squared-difference":
        return diff
    if name == "inverse-huber":
        return np.where(np.abs(diff) < 1.0, np.sign(diff), diff)
    raise ConfigurationError(f"unknown distance {name!r}")


# -- schedules ---------------------------------------------------------------


def magnitude_at(schedule: Schedule, k0: float, t: int) -> float:
    """Constraint magnitude at iteration ``t`` of ``schedule.T``."""
    T = schedule.T
    if t > T:
        warnings.warn(f"iteration {t} exceeds schedule length {T}; clamping", RuntimeWarning)
        t = T
    if t < 0:
        raise ConfigurationError(f"iteration must be nonnegative, got {t}")
    if schedule.kind == "constant" or k0 == 0.0:
        return float(k0)
    if schedule.kind == "exponential":
        return float(k0 * schedule.gamma ** (t / T))
    return float(k0 * (1.0 - t / T))


# -- statistics --------------------------------------------------------------


def _prior_logit(s) -> float:
    if s.prior is None:
        raise ConfigurationError(f"KL statistic needs a prior on Bernoulli slice {s.name!r}")
    if not 0.0 < s.prior < 1.0:
        raise ConfigurationError(f"prior on {s.name!r} must lie in (0, 1)")
    return float(np.log(s.prior) - np.log1p(-s.prior))


def _distribution_slices(params: ParamVector, statistic: str) -> list:
    slices = params.layout.of_kind(*DISTRIBUTION_KINDS)
    if not slices:
        raise ConfigurationError(
            f"{statistic} statistic needs distribution slices; layout has none"
        )
    return slices


def _weight_slices(params: ParamVector) -> list:
    slices = params.layout.of_kind("weight-matrix")
    if not slices:
        raise ConfigurationError("orthogonal statistic needs at least one weight-matrix slice")
    return slices


def _batch_size(params: ParamVector, slices, batched: bool) -> int:
    if not batched:
        return 1
    sizes = {s.shape[0] for s in slices if len(s.shape) >= 1}
    if len(sizes) != 1 or any(len(s.shape) < 1 for s in slices):
        raise ConfigurationError("batched statistics need a common leading batch axis")
    return sizes.pop()


def _scalar_terms(statistic: str, s, a: np.ndarray):
    """Per-element value and derivative of the entropy or KL contribution."""
    if s.kind == "bernoulli-logit":
        lam = expit(a)
        slope = lam * (1.0 - lam)
        ent = np.logaddexp(0.0, a) - a * lam
        if statistic == "entropy":
            return ent, -a * slope
        prior = _prior_logit(s)
        log_prior = -np.logaddexp(0.0, -prior)
        log_not_prior = -np.logaddexp(0.0, prior)
        kl = -ent - lam * log_prior - (1.0 - lam) * log_not_prior
        return kl, slope * (a - prior)
    if s.kind == "gaussian-log-stddev":
        if statistic == "entropy":
            return _HALF_LOG_2PIE + a, np.ones_like(a)
        var = np.exp(2.0 * a)
        return 0.5 * (var - 1.0) - a, var - 1.0
    # gaussian-mean
    if statistic == "entropy":
        return np.zeros_like(a), np.zeros_like(a)
    return 0.5 * a * a, a


def _moments(s, a: np.ndarray):
    """(mean, d mean, variance, d variance) for one slice, or Nones if absent."""
    if s.kind == "bernoulli-logit":
        lam = expit(a)
        slope = lam * (1.0 - lam)
        return lam, slope, slope, slope * (1.0 - 2.0 * lam)
    if s.kind == "gaussian-mean":
        return a, np.ones_like(a), None, None
    var = np.exp(2.0 * a)
    return None, None, var, 2.0 * var


def eval_statistic(statistic: str, params: ParamVector, batched: bool = False) -> np.ndarray:
    """Evaluate a proximity statistic; always returns a 1-D array.

    With ``batched=True`` each distribution slice carries a leading batch axis
    (amortized posteriors) and the statistic is the batch average of the
    per-datapoint statistic.
    """
    if statistic == "identity":
        if batched:
            raise ConfigurationError("identity statistic cannot be batched")
        return params.values.copy()
    if statistic == "orthogonal":
        if batched:
            raise ConfigurationError("orthogonal statistic cannot be batched")
        grams = []
        for s in _weight_slices(params):
            W = params.view(s.name)
            grams.append((W @ W.T).ravel())
        return np.concatenate(grams)
    if statistic not in STATISTICS:
        raise ConfigurationError(f"unknown statistic {statistic!r}")

    slices = _distribution_slices(params, statistic)
    B = _batch_size(params, slices, batched)
    if statistic in ("entropy", "kl"):
        total = 0.0
        for s in slices:
            value, _ = _scalar_terms(statistic, s, params.view(s.name))
            total += float(np.sum(value))
        return np.array([total / B])

    means, variances = [], []
    for s in slices:
        m, _, v, _ = _moments(s, params.view(s.name))
        if batched:
            m = None if m is None else m.mean(axis=0)
            v = None if v is None else v.mean(axis=0)
        if m is not None:
            means.append(np.ravel(m))
        if v is not None:
            variances.append(np.ravel(v))
    return np.concatenate(means + variances)


def statistic_vjp(statistic: str, params: ParamVector, cotangent, batched: bool = False) -> np.ndarray:
    """Vector-Jacobian product ``cotangent^T df/dparams``, sized like ``params``."""
    cotangent = np.asarray(cotangent, dtype=np.float64).reshape(-1)
    if statistic == "identity":
        if batched:
            raise ConfigurationError("identity statistic cannot be batched")
        if cotangent.shape != params.values.shape:
            raise ConfigurationError("cotangent shape does not match statistic")
        return cotangent.copy()

    out = np.zeros_like(params.values)
    if statistic == "orthogonal":
        if batched:
            raise ConfigurationError("orthogonal statistic cannot be batched")
        pos = 0
        for s in _weight_slices(params):
            W = params.view(s.name)
            r = W.shape[0]
            C = cotangent[pos : pos + r * r].reshape(r, r)
            pos += r * r
            out[s.offset : s.stop] = ((C + C.T) @ W).ravel()
        if pos != cotangent.shape[0]:
            raise ConfigurationError("cotangent shape does not match statistic")
        return out
    if statistic not in STATISTICS:
        raise ConfigurationError(f"unknown statistic {statistic!r}")

    slices = _distribution_slices(params, statistic)
    B = _batch_size(params, slices, batched)
    if statistic in ("entropy", "kl"):
        if cotangent.shape != (1,):
            raise ConfigurationError("cotangent shape does not match statistic")
        c = cotangent[0] / B
        for s in slices:
            _, deriv = _scalar_terms(statistic, s, params.view(s.name))
            out[s.offset : s.stop] = (c * deriv).ravel()
        return out

    # mean-variance: split the cotangent in the same order eval_statistic uses
    def per_unit(s):
        return s.size // B if batched else s.size

    n_means = sum(per_unit(s) for s in slices if s.kind != "gaussian-log-stddev")
    n_vars = sum(per_unit(s) for s in slices if s.kind != "gaussian-mean")
    if cotangent.shape[0] != n_means + n_vars:
        raise ConfigurationError("cotangent shape does not match statistic")
    mpos, vpos = 0, n_means
    for s in slices:
        _, dm, _, dv = _moments(s, params.view(s.name))
        unit_shape = s.shape[1:] if batched else s.shape
        grad = np.zeros(s.shape)
        if dm is not None:
            n = per_unit(s)
            cm = cotangent[mpos : mpos + n].reshape(unit_shape)
            mpos += n
            grad += dm * cm / B
        if dv is not None:
            n = per_unit(s)
            cv = cotangent[vpos : vpos + n].reshape(unit_shape)
            vpos += n
            grad += dv * cv / B
        out[s.offset : s.stop] = grad.ravel()
    return out


def constraint_value(config: ProximityConfig, anchor, params: ParamVector, t: int,
                     batched: bool = False) -> float:
    """``k_t * d(anchor, f(params))``."""
    k_t = magnitude_at(config.schedule, config.k0, t)
    if k_t == 0.0:
        return 0.0
    value = eval_statistic(config.statistic, params, batched)
    return k_t * distance(config.distance, anchor, value)


def constraint_gradient(config: ProximityConfig, anchor, params: ParamVector, t: int,
                        batched: bool = False):
    """Return ``(constraint value, its gradient in params)`` at iteration ``t``."""
    k_t = magnitude_at(config.schedule, config.k0, t)
    if k_t == 0.0:
        return 0.0, np.zeros_like(params.values)
    value = eval_statistic(config.statistic, params, batched)
    anchor = np.asarray(anchor, dtype=np.float64)
    d_val = distance(config.distance, anchor, value)
    cot = distance_grad(config.distance, anchor, value)
    return k_t * d_val, k_t * statistic_vjp(config.statistic, params, cot, batched)
