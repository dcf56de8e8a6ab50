"""Optimistic forward-KL and standard reverse-KL actor-critic learning on numpy."""

from .agent import FKL, RKL, RKL_CLIPPED, AgentMode, Networks, UpdateBatch, compute_update
from .divergence_core import OptimismScheduler, surrogate_td, tau_from_eta, td_error
from .envs import DistractorGrid, RiskyBandit, SwingUpPendulum, make_env
from .harness import RunConfig, evaluate, sweep, train
from .replay import ReplayBuffer, SumTree, Transition
from .tabular_oracle import TabularMdp, policy_evaluation_exact, risk_seeking_evaluation, value_iteration

__all__ = [
    "FKL", "RKL", "RKL_CLIPPED", "AgentMode", "Networks", "UpdateBatch", "compute_update",
    "OptimismScheduler", "surrogate_td", "tau_from_eta", "td_error",
    "DistractorGrid", "RiskyBandit", "SwingUpPendulum", "make_env",
    "RunConfig", "evaluate", "sweep", "train",
    "ReplayBuffer", "SumTree", "Transition",
    "TabularMdp", "policy_evaluation_exact", "risk_seeking_evaluation", "value_iteration",
]
