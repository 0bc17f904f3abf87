"""Gradient-ascent optimizers for the ELBO with optional proximity constraints.

All step functions are pure: they take an :class:`OptimizerState` and return a
new one. Adam moments live inside the state, so copying a state is enough to
replay a run exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .exceptions import ConfigurationError, DivergenceError
from .params import DISTRIBUTION_KINDS, ParamVector
from .proximity import (
    ProximityConfig,
    Schedule,
    distance,
    distance_grad,
    ema_update,
    eval_statistic,
    magnitude_at,
    statistic_vjp,
)

METHODS = ("vi", "pvi-fast", "pvi-inner", "annealing")


@dataclass(frozen=True)
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kwargs) -> "AdamMoments":
        return cls(np.zeros(n), np.zeros(n), **kwargs)


def adam_transform(moments: AdamMoments, grad, step_size: float, t: Optional[int] = None):
    """Bias-corrected Adam update for gradient *ascent*.

    Returns ``(update, new_moments)``; add ``update`` to the parameters.
    ``t`` defaults to the next step index stored in ``moments``.
    """
    t = moments.count + 1 if t is None else t
    if t < 1:
        raise ConfigurationError("adam step index must be >= 1")
    b1, b2 = moments.beta1, moments.beta2
    m = b1 * moments.m + (1.0 - b1) * grad
    v = b2 * moments.v + (1.0 - b2) * (grad * grad)
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    update = step_size * m_hat / (np.sqrt(v_hat) + moments.eps)
    return update, replace(moments, m=m, v=v, count=t)


@dataclass(frozen=True)
class OptimizerState:
    params: ParamVector
    step_size: float
    T: int
    t: int = 0
    anchor: Optional[np.ndarray] = None
    adam: Optional[AdamMoments] = None


@dataclass(frozen=True)
class StepReport:
    elbo: float
    grad_norm: float
    constraint_value: float
    k_t: float
    entropy: float


def make_state(params: ParamVector, step_size: float, T: int, adam: bool = True,
               anchor=None) -> OptimizerState:
    if step_size <= 0:
        raise ConfigurationError(f"step size must be positive, got {step_size}")
    moments = AdamMoments.zeros(len(params)) if adam else None
    return OptimizerState(params, float(step_size), int(T), 0, anchor, moments)


def direct_statistic(name: str, batched: bool = False) -> Callable:
    """Wrap :func:`eval_statistic` into the ``params -> (value, vjp)`` form."""

    def statistic(params: ParamVector):
        value = eval_statistic(name, params, batched)
        return value, lambda cot: statistic_vjp(name, params, cot, batched)

    return statistic


def init_anchor(config: ProximityConfig, params: ParamVector, statistic: Optional[Callable] = None):
    """Anchor the constraint at the statistic of the initial parameters."""
    statistic = statistic or direct_statistic(config.statistic)
    return statistic(params)[0].copy()


def _ascend(state: OptimizerState, direction: np.ndarray) -> OptimizerState:
    if state.t >= state.T:
        raise ConfigurationError(f"iteration budget T={state.T} exhausted")
    if not np.all(np.isfinite(direction)):
        raise DivergenceError(f"non-finite gradient at iteration {state.t}")
    if state.adam is not None:
        update, moments = adam_transform(state.adam, direction, state.step_size)
    else:
        update, moments = state.step_size * direction, None
    values = state.params.values + update
    if not np.all(np.isfinite(values)):
        raise DivergenceError(f"non-finite parameters after iteration {state.t}")
    return replace(state, params=state.params.replace(values), t=state.t + 1, adam=moments)


def euclidean_step(state: OptimizerState, elbo_grad) -> OptimizerState:
    """Plain (or Adam-transformed) gradient ascent: ``params + step * grad``."""
    grad = np.asarray(elbo_grad, dtype=np.float64)
    if grad.shape != state.params.values.shape:
        raise ConfigurationError("gradient shape does not match parameters")
    return _ascend(state, grad)


def _entropy_or_nan(params: ParamVector, batched: bool) -> float:
    if not params.layout.of_kind(*DISTRIBUTION_KINDS):
        return float("nan")
    return float(eval_statistic("entropy", params, batched)[0])


def fast_pvi_step(state: OptimizerState, config: ProximityConfig, elbo_grad,
                  statistic: Optional[Callable] = None, elbo: float = float("nan"),
                  entropy: Optional[float] = None):
    """One linearized proximity step followed by the f-space EMA anchor update.

    ``statistic`` maps params to ``(f(params), vjp)``; it defaults to the
    configured statistic evaluated directly on ``state.params``. Returns
    ``(new_state, StepReport)``.
    """
    if state.anchor is None:
        raise ConfigurationError("anchor not initialized; call init_anchor first")
    grad = np.asarray(elbo_grad, dtype=np.float64)
    if grad.shape != state.params.values.shape:
        raise ConfigurationError("gradient shape does not match parameters")
    statistic = statistic or direct_statistic(config.statistic)
    k_t = magnitude_at(config.schedule, config.k0, state.t)

    f_now, vjp = statistic(state.params)
    if k_t == 0.0:
        total, c_val = grad, 0.0
    else:
        c_val = k_t * distance(config.distance, state.anchor, f_now)
        penalty = k_t * vjp(distance_grad(config.distance, state.anchor, f_now))
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite ELBO gradient at iteration {state.t}")
        if not np.all(np.isfinite(penalty)):
            raise DivergenceError(f"non-finite constraint gradient at iteration {state.t}")
        total = grad - penalty

    new = _ascend(state, total)
    f_next, _ = statistic(new.params)
    new = replace(new, anchor=ema_update(state.anchor, f_next, config.ema_alpha))
    if entropy is None:
        entropy = float(f_next[0]) if config.statistic == "entropy" else _entropy_or_nan(new.params, False)
    report = StepReport(float(elbo), float(np.linalg.norm(total)), float(c_val), float(k_t), float(entropy))
    return new, report


def pvi_inner_step(state: OptimizerState, config: ProximityConfig, elbo_grad, noise_std: float,
                   rng: np.random.Generator, inner_iters: int = 50, tol: float = 1e-6,
                   inner_step_size: Optional[float] = None, divergence_bound: float = 1e6,
                   statistic: Optional[Callable] = None, elbo: float = float("nan")):
    """Perturb the iterate, then ascend the proximity update objective.

    The inner objective is the ELBO linearized at the current iterate, minus
    the ``1/(2 step)`` Euclidean penalty, minus the scheduled constraint. Its
    gradient is ascended with ``inner_step_size`` (default: the outer step)
    until its norm drops below ``tol`` or ``inner_iters`` run out.
    """
    if inner_iters < 1:
        raise ConfigurationError("inner_iters must be >= 1")
    if state.anchor is None:
        raise ConfigurationError("anchor not initialized; call init_anchor first")
    if state.t >= state.T:
        raise ConfigurationError(f"iteration budget T={state.T} exhausted")
    g = np.asarray(elbo_grad, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise DivergenceError(f"non-finite ELBO gradient at iteration {state.t}")
    statistic = statistic or direct_statistic(config.statistic)
    rho = state.step_size
    eta = rho if inner_step_size is None else inner_step_size
    k_t = magnitude_at(config.schedule, config.k0, state.t)
    base = state.params.values

    current = base + (rng.normal(0.0, noise_std, size=base.shape) if noise_std > 0 else 0.0)
    grad_u = None
    for _ in range(inner_iters):
        grad_u = g - (current - base) / rho
        if k_t != 0.0:
            f_val, vjp = statistic(state.params.replace(current))
            grad_u = grad_u - k_t * vjp(distance_grad(config.distance, state.anchor, f_val))
        if np.linalg.norm(grad_u) < tol:
            break
        current = current + eta * grad_u
        if not np.all(np.isfinite(current)) or np.linalg.norm(current - base) > divergence_bound:
            raise DivergenceError(
                f"inner loop diverged at outer iteration {state.t} "
                f"(step norm {np.linalg.norm(current - base):.3g})"
            )
    # residual at the returned point
    grad_u = g - (current - base) / rho
    new_params = state.params.replace(current)
    f_next, vjp = statistic(new_params)
    c_val = 0.0
    if k_t != 0.0:
        grad_u = grad_u - k_t * vjp(distance_grad(config.distance, state.anchor, f_next))
        c_val = k_t * distance(config.distance, state.anchor, f_next)
    new = replace(state, params=new_params, t=state.t + 1,
                  anchor=ema_update(state.anchor, f_next, config.ema_alpha))
    report = StepReport(float(elbo), float(np.linalg.norm(grad_u)), float(c_val), float(k_t),
                        _entropy_or_nan(new_params, False))
    return new, report


def annealing_temperature(temperature0: float, schedule: Schedule, t: int) -> float:
    """``1 + (temperature0 - 1) * decay(t)``; exactly 1 once ``t`` reaches ``T``."""
    if t >= schedule.T:
        return 1.0
    return 1.0 + (temperature0 - 1.0) * magnitude_at(schedule, 1.0, t)


def annealing_step(state: OptimizerState, temperature: float, grad_expected_log_joint,
                   grad_entropy) -> OptimizerState:
    """Ascend ``E_q[log p] + temperature * H(q)``."""
    if temperature < 1.0:
        raise ConfigurationError(f"temperature must be >= 1, got {temperature}")
    total = np.asarray(grad_expected_log_joint) + temperature * np.asarray(grad_entropy)
    return euclidean_step(state, total)


# -- driver ------------------------------------------------------------------


@dataclass
class GradientEstimate:
    """What a model hands the driver at each iteration.

    ``grad`` is the full ELBO gradient; ``entropy_grad`` the gradient of the
    entropy term alone (needed only for annealing). ``statistic`` overrides
    the direct statistic for amortized posteriors whose statistic depends on
    the current batch.
    """

    elbo: float
    grad: np.ndarray
    entropy: float = float("nan")
    entropy_grad: Optional[np.ndarray] = None
    statistic: Optional[Callable] = None


@dataclass
class OptimizeResult:
    params: ParamVector
    state: OptimizerState
    rows: list = field(default_factory=list)
    k0: float = 0.0
    temperature0: float = 1.0


def run_optimizer(params: ParamVector, objective: Callable, n_iter: int, method: str = "vi",
                  proximity: Optional[ProximityConfig] = None, step_size: float = 1e-3,
                  adam: bool = True, statistic: Optional[Callable] = None,
                  temperature0: float = 1.0, annealing_schedule: Optional[Schedule] = None,
                  noise_std: float = 1e-2, inner_iters: int = 50, inner_tol: float = 1e-6,
                  rng: Optional[np.random.Generator] = None, log_every: int = 100,
                  early_stop: bool = False, anchor0=None,
                  callback: Optional[Callable] = None) -> OptimizeResult:
    """Run ``n_iter`` iterations of ``method`` on ``objective(params, t)``.

    ``objective`` returns a :class:`GradientEstimate`. Rows of the form
    ``{t, elbo, constraint_value, k_t, entropy, grad_norm, wall_time}`` are
    recorded every ``log_every`` iterations and at the last one. ``anchor0``
    overrides the initial anchor ``f(params)``.
    """
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}")
    if method in ("pvi-fast", "pvi-inner") and proximity is None:
        raise ConfigurationError(f"{method} needs a ProximityConfig")
    if method == "pvi-inner" and adam:
        raise ConfigurationError("pvi-inner runs plain gradient ascent; set adam=False")
    rng = np.random.default_rng(0) if rng is None else rng
    state = make_state(params, step_size, n_iter, adam=adam)
    if method in ("pvi-fast", "pvi-inner") and anchor0 is not None:
        state = replace(state, anchor=np.array(anchor0, dtype=np.float64))
    elif method in ("pvi-fast", "pvi-inner"):
        stat0 = statistic
        if stat0 is None:
            est0 = objective(params, 0)
            stat0 = est0.statistic or direct_statistic(proximity.statistic)
        state = replace(state, anchor=init_anchor(proximity, params, stat0))
    anneal_schedule = annealing_schedule or Schedule("exponential", 1e-5, n_iter)

    rows = []
    history = []
    start = time.perf_counter()
    for t in range(n_iter):
        est = objective(state.params, t)
        if not np.isfinite(est.elbo):
            raise DivergenceError(f"non-finite ELBO at iteration {t}")
        stat = est.statistic or statistic
        if method == "vi":
            state = euclidean_step(state, est.grad)
            report = StepReport(est.elbo, float(np.linalg.norm(est.grad)), 0.0, 0.0, est.entropy)
        elif method == "annealing":
            temp = annealing_temperature(temperature0, anneal_schedule, t)
            if temp == 1.0:
                state = euclidean_step(state, est.grad)
                total = est.grad
            else:
                if est.entropy_grad is None:
                    raise ConfigurationError("annealing needs entropy gradients from the model")
                total = est.grad + (temp - 1.0) * est.entropy_grad
                state = euclidean_step(state, total)
            report = StepReport(est.elbo, float(np.linalg.norm(total)), 0.0, temp, est.entropy)
        elif method == "pvi-fast":
            entropy = None if np.isnan(est.entropy) else est.entropy
            state, report = fast_pvi_step(state, proximity, est.grad, statistic=stat,
                                          elbo=est.elbo, entropy=entropy)
        else:
            state, report = pvi_inner_step(state, proximity, est.grad, noise_std, rng,
                                           inner_iters=inner_iters, tol=inner_tol,
                                           statistic=stat, elbo=est.elbo)
        if callback is not None:
            callback(t, state, report)
        if t % log_every == 0 or t == n_iter - 1:
            rows.append({
                "t": t,
                "elbo": report.elbo,
                "constraint_value": report.constraint_value,
                "k_t": report.k_t,
                "entropy": report.entropy,
                "grad_norm": report.grad_norm,
                "wall_time": time.perf_counter() - start,
            })
        if early_stop:
            history.append(est.elbo)
            if len(history) >= 200 and t % 100 == 0:
                prev = np.mean(history[-200:-100])
                curr = np.mean(history[-100:])
                if abs(curr - prev) < 1e-6 * max(abs(prev), 1e-12):
                    break
    return OptimizeResult(state.params, state, rows,
                          k0=proximity.k0 if proximity is not None else 0.0,
                          temperature0=temperature0)
