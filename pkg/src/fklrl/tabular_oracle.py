"""Exact tabular ground truth.

A :class:`TabularMdp` is stored as a flat list of joint outcomes
``(state, action, probability, reward, next_state)``, which covers both random
rewards and random transitions.  Terminal states are absorbing with value zero.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from .divergence_core import surrogate_td

TOLERANCE = 1e-10
MAX_ITERATIONS = 100_000


class ConvergenceError(RuntimeError):
    pass


@dataclass
class TabularMdp:
    n_states: int
    n_actions: int
    out_state: np.ndarray
    out_action: np.ndarray
    out_prob: np.ndarray
    out_reward: np.ndarray
    out_next: np.ndarray
    gamma: float
    terminal: np.ndarray
    initial: np.ndarray

    @classmethod
    def from_outcomes(cls, n_states, n_actions, outcomes, gamma, terminal=None, initial=None):
        s, a, p, r, nxt = (np.array(col) for col in zip(*outcomes))
        terminal = np.zeros(n_states, dtype=bool) if terminal is None else np.asarray(terminal, dtype=bool)
        if initial is None:
            initial = (~terminal).astype(float)
        initial = np.asarray(initial, dtype=float) / np.sum(initial)
        mdp = cls(n_states, n_actions, s.astype(np.int64), a.astype(np.int64), p.astype(float),
                  r.astype(float), nxt.astype(np.int64), float(gamma), terminal, initial)
        mdp.validate()
        return mdp

    def validate(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if np.any(self.out_prob < 0):
            raise ValueError("negative outcome probability")
        totals = self.transition_tensor().sum(axis=2)
        live = ~self.terminal
        if not np.allclose(totals[live], 1.0, rtol=0, atol=1e-12):
            raise ValueError("transition rows of non-terminal states must sum to 1")

    def transition_tensor(self) -> np.ndarray:
        """``P[s, a, s']``; rows of terminal states are self-loops."""
        P = np.zeros((self.n_states, self.n_actions, self.n_states))
        np.add.at(P, (self.out_state, self.out_action, self.out_next), self.out_prob)
        for s in np.flatnonzero(self.terminal):
            P[s, :, :] = 0.0
            P[s, :, s] = 1.0
        return P

    def expected_reward(self) -> np.ndarray:
        R = np.zeros((self.n_states, self.n_actions))
        np.add.at(R, (self.out_state, self.out_action), self.out_prob * self.out_reward)
        return R

    def outcome_table(self, state: int, action: int):
        """Probabilities, rewards and next states for one state-action pair."""
        m = (self.out_state == state) & (self.out_action == action)
        return self.out_prob[m], self.out_reward[m], self.out_next[m]

    def _targets(self, V: np.ndarray) -> np.ndarray:
        return self.out_reward + self.gamma * np.where(self.terminal[self.out_next], 0.0, V[self.out_next])


def _stop_threshold(mdp: TabularMdp, V: np.ndarray, tol: float) -> float:
    # A sweep change of d bounds the distance to the fixed point by d * gamma / (1 - gamma).
    return max(tol * (1.0 - mdp.gamma), 8 * float(np.spacing(np.abs(V).max())))


def _check_policy(mdp: TabularMdp, policy) -> np.ndarray:
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy must have shape {(mdp.n_states, mdp.n_actions)}")
    if not np.allclose(policy.sum(axis=1), 1.0, atol=1e-12) or np.any(policy < 0):
        raise ValueError("policy rows must be probability vectors")
    return policy


def policy_evaluation_exact(mdp: TabularMdp, policy) -> np.ndarray:
    """Solve ``(I - gamma P_pi) V = r_pi`` on the non-terminal states."""
    policy = _check_policy(mdp, policy)
    P = mdp.transition_tensor()
    live = ~mdp.terminal
    P_pi = np.einsum("sa,sat->st", policy, P)[np.ix_(live, live)]
    r_pi = (policy * mdp.expected_reward()).sum(axis=1)[live]
    V = np.zeros(mdp.n_states)
    V[live] = np.linalg.solve(np.eye(int(live.sum())) - mdp.gamma * P_pi, r_pi)
    return V


def risk_seeking_backup(mdp: TabularMdp, policy: np.ndarray, V: np.ndarray, tau: float) -> np.ndarray:
    """One sweep of ``V(s) = tau * log E[exp((r + gamma V(s')) / tau)]``."""
    weight = policy[mdp.out_state, mdp.out_action] * mdp.out_prob
    x = mdp._targets(V) / tau
    with np.errstate(divide="ignore"):
        logw = np.log(weight)
    out = np.full(mdp.n_states, -np.inf)
    np.logaddexp.at(out, mdp.out_state, x + logw)
    out = tau * out
    out[mdp.terminal] = 0.0
    return out


def risk_seeking_evaluation(mdp: TabularMdp, policy, tau: float,
                            tol: float = TOLERANCE, max_iter: int = MAX_ITERATIONS) -> np.ndarray:
    """Fixed point of the exponential-utility Bellman operator, where the mean optimistic TD error vanishes.

    Iteration stops once the sup-norm distance to the fixed point is provably below ``tol``.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    policy = _check_policy(mdp, policy)
    if np.isinf(tau):
        return policy_evaluation_exact(mdp, policy)
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        new = risk_seeking_backup(mdp, policy, V, tau)
        if np.max(np.abs(new - V)) <= _stop_threshold(mdp, new, tol):
            return new
        V = new
    raise ConvergenceError(f"risk-seeking evaluation did not converge in {max_iter} sweeps")


def bellman_optimality_backup(mdp: TabularMdp, V: np.ndarray) -> np.ndarray:
    return bellman_q(mdp, V).max(axis=1)


def bellman_q(mdp: TabularMdp, V: np.ndarray) -> np.ndarray:
    Q = np.zeros((mdp.n_states, mdp.n_actions))
    np.add.at(Q, (mdp.out_state, mdp.out_action), mdp.out_prob * mdp._targets(V))
    Q[mdp.terminal] = 0.0
    return Q


def value_iteration(mdp: TabularMdp, tol: float = TOLERANCE,
                    max_iter: int = MAX_ITERATIONS) -> tuple[np.ndarray, np.ndarray]:
    """Optimal values and the greedy deterministic policy (ties to the lowest action index)."""
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        new = bellman_optimality_backup(mdp, V)
        if np.max(np.abs(new - V)) <= _stop_threshold(mdp, new, tol):
            V = new
            break
        V = new
    else:
        raise ConvergenceError(f"value iteration did not converge in {max_iter} sweeps")
    greedy = np.argmax(bellman_q(mdp, V), axis=1)
    policy = np.zeros((mdp.n_states, mdp.n_actions))
    policy[np.arange(mdp.n_states), greedy] = 1.0
    return V, policy


def default_step_size(t: int, alpha0: float = 0.1, horizon: float = 1e4) -> float:
    return alpha0 / (1.0 + t / horizon)


def tabular_td_run(mdp: TabularMdp, policy, steps: int, rng: np.random.Generator,
                   tau: float | None = None, step_size=default_step_size,
                   average_from: float | None = None) -> np.ndarray:
    """Stochastic-approximation TD(0) on a value table under a fixed policy.

    ``tau=None`` applies the raw TD error; a positive ``tau`` applies
    ``surrogate_td(delta, tau)``.  Episodes restart from ``mdp.initial`` on
    reaching a terminal state.  When ``average_from`` in ``[0, 1)`` is given, the
    returned table is the running average of the iterates over the final
    ``1 - average_from`` fraction of steps (Polyak-Ruppert averaging).
    """
    policy = _check_policy(mdp, policy)
    nA = mdp.n_actions
    tables = []
    for st in range(mdp.n_states):
        for a in range(nA):
            probs, rewards, nexts = mdp.outcome_table(st, a)
            tables.append((np.cumsum(probs).tolist(), rewards.tolist(), nexts.tolist()))
    cum_policy = np.cumsum(policy, axis=1).tolist()
    cum_initial = np.cumsum(mdp.initial).tolist()
    terminal = mdp.terminal.tolist()
    gamma = mdp.gamma
    V = [0.0] * mdp.n_states
    avg, n_avg = np.zeros(mdp.n_states), 0
    start_avg = steps if average_from is None else int(average_from * steps)
    u = rng.random((steps, 2)).tolist()
    s = min(bisect_right(cum_initial, rng.random()), mdp.n_states - 1)
    for t in range(steps):
        u_a, u_o = u[t]
        a = min(bisect_right(cum_policy[s], u_a), nA - 1)
        cum, rewards, nexts = tables[s * nA + a]
        k = min(bisect_right(cum, u_o), len(cum) - 1)
        nxt = nexts[k]
        bootstrap = 0.0 if terminal[nxt] else V[nxt]
        delta = rewards[k] + gamma * bootstrap - V[s]
        error = delta if tau is None else surrogate_td(delta, tau)
        V[s] += step_size(t) * error
        if t >= start_avg:
            n_avg += 1
            avg += (np.asarray(V) - avg) / n_avg
        if terminal[nxt]:
            s = min(bisect_right(cum_initial, rng.random()), mdp.n_states - 1)
        else:
            s = nxt
    return avg if n_avg else np.asarray(V)
