"""Capacity-bounded prioritized replay.

Records keep the signed TD error from their latest evaluation.  Sampling weights
are derived from it at sampling time, either ``|delta| + eps`` or, under the
optimistic rule, ``|surrogate_td(delta, tau)| + eps`` with the current tau.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .divergence_core import surrogate_td

RKL_PRIORITY = "rkl"
FKL_PRIORITY = "fkl"


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    reward: float
    terminal: bool
    behavior_log_prob: float
    delta: float = 0.0


class SumTree:
    """Array-backed binary tree of non-negative leaf weights.

    Leaf ``i`` lives at ``capacity + i`` and node ``k`` holds the sum of ``2k`` and
    ``2k + 1``; ``capacity`` is a power of two.
    """

    def __init__(self, capacity: int):
        self.capacity = 1 << max(0, int(capacity - 1).bit_length())
        self.nodes = np.zeros(2 * self.capacity)

    @property
    def total(self) -> float:
        return float(self.nodes[1])

    def leaves(self) -> np.ndarray:
        return self.nodes[self.capacity:]

    def update(self, index: int, value: float) -> None:
        k = index + self.capacity
        self.nodes[k] = value
        k //= 2
        while k >= 1:
            self.nodes[k] = self.nodes[2 * k] + self.nodes[2 * k + 1]
            k //= 2

    def rebuild(self, leaf_values: np.ndarray) -> None:
        self.nodes[:] = 0.0
        self.nodes[self.capacity:self.capacity + len(leaf_values)] = leaf_values
        lo = self.capacity
        while lo > 1:
            hi, lo = lo, lo // 2
            self.nodes[lo:hi] = self.nodes[2 * lo:2 * hi:2] + self.nodes[2 * lo + 1:2 * hi:2]

    def find(self, mass: np.ndarray) -> np.ndarray:
        """Leaf indices whose cumulative-weight interval contains each ``mass``."""
        mass = np.array(mass, dtype=np.float64, ndmin=1)
        k = np.ones(mass.shape, dtype=np.int64)
        while k[0] < self.capacity:
            left = self.nodes[2 * k]
            go_right = (mass >= left) & (self.nodes[2 * k + 1] > 0)
            mass = np.where(go_right, mass - left, mass)
            k = 2 * k + go_right
        return k - self.capacity


class ReplayBuffer:
    """Ring buffer of transitions with proportional prioritized sampling."""

    def __init__(self, capacity: int = 100_000, alpha: float = 0.6, beta: float = 0.4,
                 epsilon: float = 1e-5):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.alpha = alpha
        self.beta = beta
        self.epsilon = epsilon
        self.size = 0
        self.next_index = 0
        self.deltas = np.zeros(capacity)
        # The tree covers only the filled prefix and grows with it, so rebuilds stay cheap.
        self.tree = SumTree(1)
        self._tree_key: tuple | None = None
        self._records: dict[str, np.ndarray] | None = None
        # Incremented per slot on overwrite so stale sampled indices can be detected.
        self.generation = np.zeros(capacity, dtype=np.int64)

    def __len__(self) -> int:
        return self.size

    def _allocate(self, t: Transition) -> None:
        n = self.capacity
        self._records = {
            "state": np.zeros((n,) + np.shape(t.state)),
            "action": np.zeros((n,) + np.shape(np.atleast_1d(t.action))),
            "next_state": np.zeros((n,) + np.shape(t.next_state)),
            "reward": np.zeros(n),
            "terminal": np.zeros(n, dtype=bool),
            "behavior_log_prob": np.zeros(n),
        }

    def push(self, transition: Transition, delta: float | None = None) -> int:
        """Store a transition with its signed TD error (defaults to ``transition.delta``).

        Only ``|delta|`` enters the default priority rule.  Returns the slot index.
        """
        delta = transition.delta if delta is None else delta
        if not np.isfinite(delta):
            raise ValueError("delta must be finite")
        if self._records is None:
            self._allocate(transition)
        i = self.next_index
        r = self._records
        r["state"][i] = transition.state
        r["action"][i] = np.atleast_1d(transition.action)
        r["next_state"][i] = transition.next_state
        r["reward"][i] = transition.reward
        r["terminal"][i] = transition.terminal
        r["behavior_log_prob"][i] = transition.behavior_log_prob
        self.deltas[i] = delta
        self.generation[i] += 1
        self.next_index = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self._refresh([i])
        return i

    def priority_weights(self, rule: str = RKL_PRIORITY, tau: float = np.inf) -> np.ndarray:
        """Unnormalized ``w_i ** alpha`` for every stored record."""
        d = self.deltas[:self.size]
        if rule == RKL_PRIORITY:
            w = np.abs(d) + self.epsilon
        elif rule == FKL_PRIORITY:
            w = np.abs(surrogate_td(d, tau)) + self.epsilon
        else:
            raise ValueError(f"unknown priority rule {rule!r}")
        return w ** self.alpha

    def probabilities(self, rule: str = RKL_PRIORITY, tau: float = np.inf) -> np.ndarray:
        w = self.priority_weights(rule, tau)
        return w / w.sum()

    def _sync_tree(self, rule: str, tau: float) -> None:
        key = (rule, tau if rule == FKL_PRIORITY else None)
        if self.tree.capacity < self.size:
            self.tree = SumTree(min(self.capacity, max(2 * self.tree.capacity, self.size)))
            self._tree_key = None
        if key != self._tree_key:
            self.tree.rebuild(self.priority_weights(rule, tau))
            self._tree_key = key

    def sample(self, n: int, rule: str = RKL_PRIORITY, tau: float = np.inf,
               rng: np.random.Generator | None = None):
        """Draw ``n`` indices with replacement; returns ``(indices, importance_weights)``.

        Importance weights are ``(N * p_i) ** -beta`` scaled by their batch maximum.
        """
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        rng = np.random.default_rng() if rng is None else rng
        self._sync_tree(rule, tau)
        total = self.tree.total
        idx = self.tree.find(rng.random(n) * total)
        idx = np.minimum(idx, self.size - 1)
        p = self.tree.leaves()[idx] / total
        weights = (self.size * p) ** -self.beta
        return idx, weights / weights.max()

    def batch(self, indices) -> dict[str, np.ndarray]:
        return {k: v[indices] for k, v in self._records.items()}

    def update_priorities(self, indices, deltas, generations=None) -> None:
        """Replace stored signed TD errors.

        When ``generations`` (as returned by :meth:`generations_of` at sampling time) is
        given, slots overwritten since then are skipped.
        """
        indices = np.asarray(indices, dtype=np.int64)
        deltas = np.asarray(deltas, dtype=np.float64)
        keep = indices < self.size
        if generations is not None:
            keep &= self.generation[indices] == np.asarray(generations)
        self.deltas[indices[keep]] = deltas[keep]
        self._refresh(indices[keep])

    def _refresh(self, indices) -> None:
        # The plain rule does not depend on tau, so its tree is patched in place.
        if self._tree_key == (RKL_PRIORITY, None) and self.size <= self.tree.capacity:
            for i in np.unique(indices):
                w = (abs(self.deltas[i]) + self.epsilon) ** self.alpha
                self.tree.update(int(i), w)
        else:
            self._tree_key = None

    def generations_of(self, indices) -> np.ndarray:
        return self.generation[np.asarray(indices, dtype=np.int64)].copy()


def naive_sample(probabilities: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling by linear scan; reference for the tree sampler."""
    cdf = np.cumsum(probabilities)
    return np.minimum(np.searchsorted(cdf, uniforms * cdf[-1], side="right"),
                      len(probabilities) - 1)
