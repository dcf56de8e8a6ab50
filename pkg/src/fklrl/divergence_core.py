"""TD errors, the optimistic surrogate, optimality probabilities and the tau scheduler.

Everything here is stateless except :class:`OptimismScheduler`.  Functions accept
scalars or numpy arrays where that is natural.

Zero optimism is represented by ``tau = math.inf``: the surrogate is then the
identity, which is the ``tau -> inf`` limit of ``tau * (exp(delta / tau) - 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Upper bound on delta / tau before exponentiation; exp(30) ~ 1e13 stays finite.
MAX_EXPONENT = 30.0


class NonFiniteInput(ValueError, FloatingPointError):
    """A NaN or infinity reached a computation that requires finite numbers."""


def _check_finite(*values) -> None:
    for v in values:
        if not np.all(np.isfinite(v)):
            raise NonFiniteInput(f"non-finite input: {v!r}")


def td_error(reward, next_value, value, gamma: float, terminal=False):
    """One-step TD error ``r + gamma * V(s') - V(s)``; ``V(s')`` is zero on terminal steps."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    _check_finite(reward, next_value, value)
    bootstrap = np.where(terminal, 0.0, next_value)
    out = reward + gamma * bootstrap - value
    return float(out) if np.ndim(out) == 0 else out


def surrogate_td(delta, tau: float):
    """Optimistic surrogate ``tau * (exp(delta / tau) - 1)``.

    The result keeps the sign of ``delta``, never drops below ``-tau`` and is never
    smaller than ``delta``.  ``tau = inf`` returns ``delta`` unchanged.  The exponent
    is clamped at :data:`MAX_EXPONENT`.
    """
    if math.isinf(tau) and tau > 0:
        return delta
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    x = np.minimum(np.asarray(delta, dtype=float) / tau, MAX_EXPONENT)
    out = tau * np.expm1(x)
    return float(out) if np.ndim(out) == 0 else out


def exponent_clamped(delta, tau: float) -> bool:
    """True when any ``delta / tau`` exceeds the overflow guard."""
    if math.isinf(tau):
        return False
    return bool(np.any(np.asarray(delta, dtype=float) / tau > MAX_EXPONENT))


def tau_from_eta(delta_scale: float, eta: float, epsilon: float) -> float:
    """Convert the optimism level ``eta`` into the uncertainty ``tau``.

    ``tau`` is chosen so that ``surrogate_td(-D, tau) == -eta * tau`` where ``D`` is
    ``delta_scale`` clamped to ``[epsilon, 1 / epsilon]``.
    """
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    clamped = max(min(delta_scale, 1.0 / epsilon), epsilon)
    return -clamped / math.log1p(-eta)


@dataclass
class OptimismScheduler:
    """Running estimate of the TD-error scale and the resulting ``tau``.

    ``eta == 0`` selects zero optimism: :attr:`tau` is ``inf`` while the scale
    estimate is still tracked (it is reported in the run metrics).
    """

    eta: float
    beta: float = 0.999
    epsilon: float = 1e-5
    delta_max: float = field(default=None)  # type: ignore[assignment]
    delta_scale: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if not (self.eta == 0.0 or 0.0 < self.eta < 1.0):
            raise ValueError(f"eta must be 0 or lie in (0, 1), got {self.eta}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.delta_max is None:
            self.delta_max = 1.0 / self.epsilon
        if self.delta_scale is None:
            self.delta_scale = 1.0 / self.epsilon

    @property
    def zero_optimism(self) -> bool:
        return self.eta == 0.0

    @property
    def tau(self) -> float:
        if self.zero_optimism:
            return math.inf
        return tau_from_eta(self.delta_scale, self.eta, self.epsilon)

    def update(self, batch_abs_deltas) -> float:
        """Fold one batch of ``|delta|`` into the scale estimate and return the new tau."""
        batch = np.asarray(batch_abs_deltas, dtype=float).ravel()
        if batch.size == 0:
            return self.tau
        if np.any(batch < 0) or not np.all(np.isfinite(batch)):
            raise ValueError("batch_abs_deltas must be finite and non-negative")
        self.delta_max = max(self.beta * self.delta_max, float(batch.max()))
        self.delta_scale = self.beta * self.delta_scale + (1.0 - self.beta) * self.delta_max
        return self.tau


def scheduler_update(scheduler: OptimismScheduler, batch_abs_deltas) -> float:
    return scheduler.update(batch_abs_deltas)


@dataclass(frozen=True)
class OptimalityModel:
    """Bernoulli optimality probabilities ``exp((V - C) / tau)`` and ``exp((Q - C) / tau)``.

    ``ceiling`` (C) must dominate both values.  Only diagnostic code builds this
    type; the training path works with ``Q - V`` alone.
    """

    value: float
    action_value: float
    ceiling: float
    tau: float

    def __post_init__(self):
        if not self.tau > 0 or math.isinf(self.tau):
            raise ValueError(f"tau must be positive and finite, got {self.tau}")
        if self.value - self.ceiling > 0 or self.action_value - self.ceiling > 0:
            raise ValueError("value and action_value must not exceed the ceiling")
        if not (0.0 < self.p_value < 1.0 and 0.0 < self.p_action < 1.0):
            raise ValueError("optimality probabilities must lie strictly inside (0, 1)")

    @property
    def p_value(self) -> float:
        return math.exp((self.value - self.ceiling) / self.tau)

    @property
    def p_action(self) -> float:
        return math.exp((self.action_value - self.ceiling) / self.tau)


def bernoulli_kl(p: float, q: float) -> float:
    """KL divergence between Bernoulli(p) and Bernoulli(q)."""
    return p * math.log(p / q) + (1.0 - p) * math.log((1.0 - p) / (1.0 - q))


def bernoulli_forward_kl(model: OptimalityModel) -> float:
    """KL(p(O | s, a) || p(O | s)): the action-conditioned optimality is the target."""
    return bernoulli_kl(model.p_action, model.p_value)


def bernoulli_reverse_kl(model: OptimalityModel) -> float:
    """KL(p(O | s) || p(O | s, a))."""
    return bernoulli_kl(model.p_value, model.p_action)


@dataclass(frozen=True)
class ValueGradient:
    """Coefficient multiplying ``grad V(s)`` in an exact and a computable form.

    ``computable`` differs from ``exact`` by a positive factor, so both point the
    same way.
    """

    exact: float
    computable: float


def value_grad_forward(model: OptimalityModel) -> ValueGradient:
    """Gradient of :func:`bernoulli_forward_kl` with respect to ``V``.

    The computable form ``-tau * (exp((Q - V) / tau) - 1)`` equals the exact one
    times ``tau**2 * (1 - p_V) / p_V``.
    """
    p_v, p_q, tau = model.p_value, model.p_action, model.tau
    exact = -(p_q - p_v) / (tau * (1.0 - p_v))
    computable = -surrogate_td(model.action_value - model.value, tau)
    return ValueGradient(exact, computable)


def value_grad_reverse(model: OptimalityModel) -> ValueGradient:
    """Gradient of :func:`bernoulli_reverse_kl` with respect to ``V``.

    The computable form is the ``tau -> 0`` limit ``-(Q - V)``, the squared-error
    gradient with target ``Q``.
    """
    p_v, p_q, tau = model.p_value, model.p_action, model.tau
    diff = model.action_value - model.value
    exact = -(p_v / tau) * (diff / tau + math.log((1.0 - p_v) / (1.0 - p_q)))
    return ValueGradient(exact, -diff)


def optimality_ratios(value, action_value, tau: float):
    """Weight ``p_Q / p_V = exp((Q - V) / tau)`` of the optimal policy relative to the baseline."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    out = np.exp((np.asarray(action_value, dtype=float) - value) / tau)
    return float(out) if np.ndim(out) == 0 else out


def nonoptimal_ratio(model: OptimalityModel) -> float:
    """``(1 - p_Q) / (1 - p_V)``, the non-optimal policy weight; needs an explicit ceiling."""
    return (1.0 - model.p_action) / (1.0 - model.p_value)
