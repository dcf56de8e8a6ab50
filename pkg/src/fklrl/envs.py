"""Small deterministic-given-seed environments.

``grid``
    7x7 gridworld with a nearby +1 exit and a distant +10 exit.  Actions slip to
    a uniformly random direction with probability 0.1.
``bandit``
    One state, a safe arm paying 0.5 and a risky arm paying +1 or -1.
``pendulum``
    Torque-limited swing-up with continuous actions.

``step`` returns ``(next_state, reward, terminal)``.  Hitting the horizon ends the
episode without setting ``terminal``; check :attr:`truncated`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tabular_oracle import TabularMdp


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    horizon: int
    n_actions: int | None = None  # discrete action count
    action_low: tuple[float, ...] | None = None
    action_high: tuple[float, ...] | None = None
    reward_range: tuple[float, float] = (-math.inf, math.inf)

    @property
    def discrete(self) -> bool:
        return self.n_actions is not None

    @property
    def action_dim(self) -> int:
        return 1 if self.discrete else len(self.action_low)


class EpisodeOver(RuntimeError):
    pass


class _Env:
    spec: EnvSpec

    def __init__(self):
        self.t = 0
        self.done = True
        self.truncated = False

    def _begin(self):
        self.t = 0
        self.done = False
        self.truncated = False

    def _advance(self, terminal: bool) -> None:
        self.t += 1
        if terminal:
            self.done = True
        elif self.t >= self.spec.horizon:
            self.done = True
            self.truncated = True

    def _check_live(self):
        if self.done:
            raise EpisodeOver("step() called on a finished episode; call reset()")


class DistractorGrid(_Env):
    SIZE = 7
    START = (0, 0)
    NEAR = (0, 3)
    FAR = (6, 6)
    NEAR_REWARD = 1.0
    FAR_REWARD = 10.0
    STEP_REWARD = -0.05
    # up, right, down, left as (row, col) offsets
    MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))

    def __init__(self, slip: float = 0.1, horizon: int = 100):
        super().__init__()
        self.slip = slip
        n = self.SIZE * self.SIZE
        self.spec = EnvSpec(state_dim=n, horizon=horizon, n_actions=4,
                            reward_range=(self.STEP_REWARD, self.FAR_REWARD + self.STEP_REWARD))
        self.pos = self.START
        self.rng = np.random.default_rng()

    @property
    def n_cells(self) -> int:
        return self.SIZE * self.SIZE

    def cell(self, pos) -> int:
        return pos[0] * self.SIZE + pos[1]

    def features(self, pos) -> np.ndarray:
        x = np.zeros(self.n_cells)
        x[self.cell(pos)] = 1.0
        return x

    def is_terminal_cell(self, pos) -> bool:
        return pos == self.NEAR or pos == self.FAR

    def move(self, pos, direction: int):
        dr, dc = self.MOVES[direction]
        r, c = pos[0] + dr, pos[1] + dc
        if 0 <= r < self.SIZE and 0 <= c < self.SIZE:
            return (r, c)
        return pos

    def reward_for(self, next_pos) -> float:
        r = self.STEP_REWARD
        if next_pos == self.NEAR:
            r += self.NEAR_REWARD
        elif next_pos == self.FAR:
            r += self.FAR_REWARD
        return r

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.rng = rng
        self._begin()
        self.pos = self.START
        return self.features(self.pos)

    def step(self, action):
        self._check_live()
        a = int(np.asarray(action).ravel()[0])
        if not 0 <= a < 4:
            raise ValueError(f"invalid action {action!r}")
        if self.slip > 0 and self.rng.random() < self.slip:
            a = int(self.rng.integers(4))
        self.pos = self.move(self.pos, a)
        terminal = self.is_terminal_cell(self.pos)
        reward = self.reward_for(self.pos)
        self._advance(terminal)
        return self.features(self.pos), reward, terminal

    def enumerate_mdp(self, gamma: float = 0.99) -> TabularMdp:
        outcomes = []
        terminal = np.zeros(self.n_cells, dtype=bool)
        for r in range(self.SIZE):
            for c in range(self.SIZE):
                pos = (r, c)
                s = self.cell(pos)
                if self.is_terminal_cell(pos):
                    terminal[s] = True
                    continue
                for a in range(4):
                    probs: dict[int, float] = {}
                    for actual in range(4):
                        p = self.slip / 4 + (1.0 - self.slip if actual == a else 0.0)
                        nxt = self.move(pos, actual)
                        key = self.cell(nxt)
                        probs[key] = probs.get(key, 0.0) + p
                    for nxt_cell, p in probs.items():
                        nxt = divmod(nxt_cell, self.SIZE)
                        outcomes.append((s, a, p, self.reward_for(nxt), nxt_cell))
        initial = np.zeros(self.n_cells)
        initial[self.cell(self.START)] = 1.0
        return TabularMdp.from_outcomes(self.n_cells, 4, outcomes, gamma, terminal, initial)


class RiskyBandit(_Env):
    SAFE, RISKY = 0, 1
    SAFE_REWARD = 0.5

    def __init__(self):
        super().__init__()
        self.spec = EnvSpec(state_dim=1, horizon=1, n_actions=2, reward_range=(-1.0, 1.0))
        self.rng = np.random.default_rng()

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.rng = rng
        self._begin()
        return np.ones(1)

    def step(self, action):
        self._check_live()
        a = int(np.asarray(action).ravel()[0])
        if a == self.SAFE:
            reward = self.SAFE_REWARD
        elif a == self.RISKY:
            reward = 1.0 if self.rng.random() < 0.5 else -1.0
        else:
            raise ValueError(f"invalid action {action!r}")
        self._advance(True)
        return np.ones(1), reward, True

    def enumerate_mdp(self, gamma: float = 0.0) -> TabularMdp:
        # state 0 is the decision state, state 1 the absorbing exit
        outcomes = [(0, self.SAFE, 1.0, self.SAFE_REWARD, 1),
                    (0, self.RISKY, 0.5, 1.0, 1),
                    (0, self.RISKY, 0.5, -1.0, 1)]
        return TabularMdp.from_outcomes(2, 2, outcomes, gamma, np.array([False, True]),
                                        np.array([1.0, 0.0]))


def wrap_angle(theta: float) -> float:
    return (theta + math.pi) % (2.0 * math.pi) - math.pi


class SwingUpPendulum(_Env):
    GRAVITY = 10.0
    LENGTH = 1.0
    MASS = 1.0
    MAX_TORQUE = 2.0
    MAX_SPEED = 8.0
    DT = 0.05

    def __init__(self, horizon: int = 200):
        super().__init__()
        max_cost = math.pi ** 2 + 0.1 * self.MAX_SPEED ** 2 + 0.001 * self.MAX_TORQUE ** 2
        self.spec = EnvSpec(state_dim=3, horizon=horizon, action_low=(-self.MAX_TORQUE,),
                            action_high=(self.MAX_TORQUE,), reward_range=(-max_cost, 0.0))
        self.theta = math.pi
        self.theta_dot = 0.0

    def observe(self) -> np.ndarray:
        return np.array([math.cos(self.theta), math.sin(self.theta), self.theta_dot])

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._begin()
        self.theta = math.pi + rng.uniform(-0.05, 0.05)
        self.theta_dot = rng.uniform(-0.05, 0.05)
        return self.observe()

    def set_state(self, theta: float, theta_dot: float) -> None:
        self.theta, self.theta_dot = theta, theta_dot

    def step(self, action):
        self._check_live()
        u = float(np.clip(np.asarray(action, dtype=float).ravel()[0], -self.MAX_TORQUE, self.MAX_TORQUE))
        th, thd = self.theta, self.theta_dot
        reward = -(wrap_angle(th) ** 2 + 0.1 * thd ** 2 + 0.001 * u ** 2)
        acc = (self.GRAVITY / self.LENGTH) * math.sin(th) + u / (self.MASS * self.LENGTH ** 2)
        thd = min(max(thd + acc * self.DT, -self.MAX_SPEED), self.MAX_SPEED)
        self.theta = th + thd * self.DT
        self.theta_dot = thd
        self._advance(False)
        return self.observe(), reward, False

    def enumerate_mdp(self, gamma: float = 0.99):
        raise TypeError("the pendulum has a continuous state space")


ENVIRONMENTS = {"grid": DistractorGrid, "bandit": RiskyBandit, "pendulum": SwingUpPendulum}


def make_env(env_id: str):
    try:
        return ENVIRONMENTS[env_id]()
    except KeyError:
        raise ValueError(f"unknown environment {env_id!r}; choose from {sorted(ENVIRONMENTS)}") from None


def enumerate_mdp(env, gamma: float | None = None) -> TabularMdp:
    return env.enumerate_mdp() if gamma is None else env.enumerate_mdp(gamma)
