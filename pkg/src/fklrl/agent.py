"""Reverse-KL (standard actor-critic) and forward-KL (optimistic) update rules.

Both rules share one shape:

    value descent gradient  = -mean_i( w_i * e_i * grad V(s_i) )
    policy descent gradient = -mean_i( w_i * e_i * rho_i * grad ln pi(a_i | s_i) )

They differ only in the error ``e`` (TD error vs. its optimistic surrogate) and
the density ratio ``rho`` (``pi / b``, optionally clipped, vs. exactly 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .approximator import MlpParams, PolicyNetwork, make_value_params, mlp_backward, mlp_forward
from .divergence_core import MAX_EXPONENT, OptimismScheduler, surrogate_td, td_error

RKL = "rkl"
RKL_CLIPPED = "rkl-clipped"
FKL = "fkl"
VARIANTS = (RKL, RKL_CLIPPED, FKL)


@dataclass(frozen=True)
class AgentMode:
    variant: str = FKL
    eta: float = 0.5
    rho_clip: float = 1.3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.rho_clip > 0:
            raise ValueError("rho_clip must be positive")

    @property
    def optimistic(self) -> bool:
        return self.variant == FKL


def entropy_bonus(reward, action_log_prob, tau_h: float):
    """Reward shaped with the negative log-likelihood of the taken action."""
    return reward - tau_h * action_log_prob


def density_ratio(policy_log_prob, behavior_log_prob, mode: AgentMode):
    """``pi / b`` for the reverse rules (clipped for ``rkl-clipped``), exactly 1 for ``fkl``.

    The log-ratio is capped at :data:`MAX_EXPONENT` before exponentiation.
    """
    if mode.optimistic:
        return np.ones_like(np.asarray(policy_log_prob, dtype=float))
    log_ratio = np.minimum(np.asarray(policy_log_prob, dtype=float) - behavior_log_prob, MAX_EXPONENT)
    ratio = np.exp(log_ratio)
    if mode.variant == RKL_CLIPPED:
        ratio = np.minimum(ratio, mode.rho_clip)
    return ratio


def ratio_overflowed(policy_log_prob, behavior_log_prob, mode: AgentMode) -> bool:
    if mode.optimistic:
        return False
    return bool(np.any(np.asarray(policy_log_prob) - behavior_log_prob > MAX_EXPONENT))


@dataclass
class UpdateBatch:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray
    behavior_log_probs: np.ndarray

    def __post_init__(self):
        self.states = np.atleast_2d(self.states)
        self.next_states = np.atleast_2d(self.next_states)
        self.rewards = np.atleast_1d(np.asarray(self.rewards, dtype=float))
        n = len(self.rewards)
        self.actions = np.asarray(self.actions, dtype=float).reshape(n, -1)
        self.terminals = np.atleast_1d(np.asarray(self.terminals, dtype=bool))
        self.behavior_log_probs = np.atleast_1d(np.asarray(self.behavior_log_probs, dtype=float))
        if n == 0:
            raise ValueError("empty batch")

    def __len__(self) -> int:
        return len(self.rewards)

    @classmethod
    def from_records(cls, records: dict[str, np.ndarray]) -> "UpdateBatch":
        return cls(records["state"], records["action"], records["next_state"], records["reward"],
                   records["terminal"], records["behavior_log_prob"])


@dataclass
class Networks:
    """Main and target copies of the value and policy networks.

    The target policy is the behavior policy ``b`` that collects data.
    """

    policy_net: PolicyNetwork
    value: MlpParams
    policy: MlpParams
    target_value: MlpParams
    target_policy: MlpParams

    @classmethod
    def create(cls, state_dim: int, policy_net: PolicyNetwork, rng: np.random.Generator,
               width: int = 100, depth: int = 5, n_heads: int = 5) -> "Networks":
        value = make_value_params(state_dim, rng, width, depth, n_heads)
        policy = policy_net.make_params(state_dim, rng, width, depth)
        return cls(policy_net, value, policy, value.copy(), policy.copy())

    def as_dict(self) -> dict[str, MlpParams]:
        return {"value": self.value, "policy": self.policy,
                "target_value": self.target_value, "target_policy": self.target_policy}


@dataclass
class Evaluation:
    """Forward quantities for a batch plus closures that backprop arbitrary per-sample seeds."""

    deltas: np.ndarray
    log_probs: np.ndarray
    value_backward: object
    policy_backward: object


def evaluate_batch(batch: UpdateBatch, nets: Networks, gamma: float) -> Evaluation:
    """TD errors against the target value network and current policy log-likelihoods."""
    v_out, v_cache = mlp_forward(nets.value, batch.states)
    v_next, _ = mlp_forward(nets.target_value, batch.next_states)
    deltas = np.asarray(td_error(batch.rewards, v_next.mean(axis=1), v_out.mean(axis=1),
                                 gamma, batch.terminals), dtype=float).reshape(-1)

    p_out, p_cache = mlp_forward(nets.policy, batch.states)
    policy_net = nets.policy_net
    dist = policy_net.distribution(p_out)
    log_probs = dist.log_prob(batch.actions)
    d_logp = policy_net.log_prob_head_grad(dist, p_out, batch.actions)
    n_heads = nets.value.output_dim

    def value_backward(seeds):
        seeds = np.asarray(seeds, dtype=float).reshape(-1, 1)
        return mlp_backward(nets.value, v_cache, np.broadcast_to(seeds / n_heads, v_out.shape))

    def policy_backward(seeds):
        seeds = np.asarray(seeds, dtype=float).reshape(-1, 1)
        return mlp_backward(nets.policy, p_cache, seeds * d_logp)

    return Evaluation(deltas, log_probs, value_backward, policy_backward)


@dataclass
class Update:
    value_grad: np.ndarray
    policy_grad: np.ndarray
    deltas: np.ndarray
    errors: np.ndarray
    ratios: np.ndarray
    log_probs: np.ndarray
    tau: float


def effective_errors(deltas, mode: AgentMode, tau: float) -> np.ndarray:
    if mode.optimistic:
        return np.asarray(surrogate_td(np.asarray(deltas, dtype=float), tau), dtype=float)
    return np.asarray(deltas, dtype=float)


def compute_update(batch: UpdateBatch, nets: Networks, mode: AgentMode, gamma: float,
                   scheduler: OptimismScheduler | None = None, tau: float | None = None,
                   sample_weights=None) -> Update:
    """Batch-mean descent gradients for both networks.

    With a ``scheduler`` the batch ``|delta|`` is folded in first and its fresh tau
    is used; otherwise ``tau`` must be supplied for the optimistic rule.
    """
    ev = evaluate_batch(batch, nets, gamma)
    if scheduler is not None:
        tau = scheduler.update(np.abs(ev.deltas))
    if tau is None:
        if mode.optimistic:
            raise ValueError("the optimistic rule needs tau or a scheduler")
        tau = np.inf
    errors = effective_errors(ev.deltas, mode, tau)
    ratios = density_ratio(ev.log_probs, batch.behavior_log_probs, mode)
    n = len(batch)
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=float)
    coeff = -w * errors / n
    return Update(ev.value_backward(coeff), ev.policy_backward(coeff * ratios),
                  ev.deltas, errors, ratios, ev.log_probs, tau)


def transition_gradients(batch: UpdateBatch, nets: Networks, mode: AgentMode, gamma: float,
                         scheduler: OptimismScheduler | None = None, tau: float | None = None):
    """Raw per-step gradients for eligibility traces on a single transition.

    Returns ``(update, grad V(s), rho * grad ln pi(a | s))``; ``update`` carries the
    TD error, effective error and tau exactly as :func:`compute_update` would.
    """
    if len(batch) != 1:
        raise ValueError("trace gradients are defined for one transition at a time")
    ev = evaluate_batch(batch, nets, gamma)
    if scheduler is not None:
        tau = scheduler.update(np.abs(ev.deltas))
    if tau is None:
        if mode.optimistic:
            raise ValueError("the optimistic rule needs tau or a scheduler")
        tau = np.inf
    errors = effective_errors(ev.deltas, mode, tau)
    ratios = density_ratio(ev.log_probs, batch.behavior_log_probs, mode)
    grad_v = ev.value_backward(np.ones(1))
    grad_pi = ev.policy_backward(ratios)
    coeff = -errors
    update = Update(coeff[0] * grad_v, coeff[0] * grad_pi, ev.deltas, errors, ratios,
                    ev.log_probs, tau)
    return update, grad_v, grad_pi
