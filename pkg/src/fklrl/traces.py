"""Lambda-weighted TD errors, their optimistic counterpart, and backward-view traces.

Two weightings are supported for the forward view:

* ``"paper"``: ``(1 - lam) * lam**k`` (no discount inside the sum)
* ``"standard"``: ``(gamma * lam)**k`` (the usual GAE weighting)

A :class:`TraceState` built with the same weighting reproduces the forward-view
sums exactly when parameters are held fixed over the episode.  Entries after the
end of an episode count as zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .divergence_core import surrogate_td

PAPER = "paper"
STANDARD = "standard"


def trace_coefficients(lam: float, gamma: float = 1.0, discount: str = PAPER) -> tuple[float, float]:
    """Return ``(scale, decay)`` so the weight on ``delta_{t+k}`` is ``scale * decay**k``."""
    if discount == PAPER:
        if not 0.0 <= lam < 1.0:
            raise ValueError(f"lambda must lie in [0, 1) for discount='paper', got {lam} "
                             "(lambda = 1 gives all-zero weights)")
        return 1.0 - lam, lam
    if discount == STANDARD:
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {lam}")
        return 1.0, gamma * lam
    raise ValueError(f"unknown discount mode {discount!r}")


def _weighted_tail_sums(values: np.ndarray, scale: float, decay: float) -> np.ndarray:
    out = np.empty_like(values)
    acc = 0.0
    for t in range(len(values) - 1, -1, -1):
        acc = values[t] + decay * acc
        out[t] = scale * acc
    return out


def gae(deltas, lam: float, gamma: float = 1.0, discount: str = PAPER) -> np.ndarray:
    """Forward-view ``delta_t^lam = sum_k w_k * delta_{t+k}`` for one episode."""
    scale, decay = trace_coefficients(lam, gamma, discount)
    return _weighted_tail_sums(np.asarray(deltas, dtype=np.float64), scale, decay)


def surrogated_gae(deltas, lam: float, tau: float, gamma: float = 1.0,
                   discount: str = PAPER) -> np.ndarray:
    """``sum_k w_k * surrogate_td(delta_{t+k}, tau)``, an upper bound on the surrogate of :func:`gae`."""
    scale, decay = trace_coefficients(lam, gamma, discount)
    surr = np.asarray(surrogate_td(np.asarray(deltas, dtype=np.float64), tau), dtype=np.float64)
    return _weighted_tail_sums(surr, scale, decay)


def gae_log_exp_bound(deltas, lam: float, tau: float) -> np.ndarray:
    """``tau * log(sum_k w_k exp(delta_{t+k} / tau))`` under ``discount="paper"``.

    The weight left over after the episode end sits on ``delta = 0``, matching
    the zero-tail convention of :func:`gae`.  This upper-bounds :func:`gae`.
    """
    scale, decay = trace_coefficients(lam)
    d = np.asarray(deltas, dtype=np.float64)
    n = len(d)
    out = np.empty(n)
    for t in range(n):
        w = np.append(scale * decay ** np.arange(n - t), decay ** (n - t))
        with np.errstate(divide="ignore"):
            logw = np.log(w)
        out[t] = tau * np.logaddexp.reduce(np.append(d[t:] / tau, 0.0) + logw)
    return out


@dataclass
class TraceState:
    """Accumulating traces for the value and policy parameters."""

    value_trace: np.ndarray
    policy_trace: np.ndarray
    scale: float
    decay: float

    @classmethod
    def zeros(cls, value_size: int, policy_size: int, lam: float, gamma: float,
              discount: str = PAPER) -> "TraceState":
        scale, decay = trace_coefficients(lam, gamma, discount)
        return cls(np.zeros(value_size), np.zeros(policy_size), scale, decay)

    def reset(self) -> None:
        self.value_trace[:] = 0.0
        self.policy_trace[:] = 0.0

    def step(self, value_grad: np.ndarray, policy_grad: np.ndarray,
             error: float) -> tuple[np.ndarray, np.ndarray]:
        """Fold in this step's gradients and return the descent gradients for both networks.

        ``value_grad`` is ``grad V(s_t)``; ``policy_grad`` is ``rho * grad ln pi(a_t | s_t)``.
        The returned vectors are ``-scale * error * trace``, ready for a minimizer.
        """
        if value_grad.shape != self.value_trace.shape or policy_grad.shape != self.policy_trace.shape:
            raise ValueError("gradient shapes do not match the traces")
        self.value_trace *= self.decay
        self.value_trace += value_grad
        self.policy_trace *= self.decay
        self.policy_trace += policy_grad
        c = -self.scale * error
        return c * self.value_trace, c * self.policy_trace


def trace_step(trace: TraceState, value_grad, policy_grad, error: float):
    return trace.step(value_grad, policy_grad, error)
