"""Training loop, configuration, metrics persistence, sweeps and evaluation.

Each episode has an online phase (per-step updates through eligibility traces)
followed by a replay phase (prioritized mini-batches, no traces).  The tau
scheduler is fed before every gradient computation in both phases.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .agent import FKL, AgentMode, Networks, UpdateBatch, compute_update, entropy_bonus, transition_gradients
from .approximator import Adam, NonFiniteGradient, PolicyNetwork, load_checkpoint, save_checkpoint, soft_update
from .divergence_core import OptimismScheduler, exponent_clamped
from .envs import DistractorGrid, make_env
from .replay import FKL_PRIORITY, RKL_PRIORITY, ReplayBuffer, Transition
from .traces import TraceState

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("episode", "return", "mean_abs_delta", "mean_log_pi", "tau", "delta_scale", "wall_ms")
EVAL_COLUMNS = ("episode", "return", "mean_abs_delta", "mean_log_pi")
SUMMARY_COLUMNS = ("eta", "seed", "status", "final_median_return", "final_mean_abs_delta",
                   "final_mean_log_pi", "final_tau", "greedy_return")
FINAL_WINDOW = 100


class NumericalAbort(RuntimeError):
    pass


@dataclass
class RunConfig:
    env: str = "grid"
    mode: str = FKL
    eta: float = 0.5  # 0 selects zero optimism
    gamma: float = 0.99
    lr: float = 5e-4
    epsilon: float = 1e-5
    beta: float = 0.999
    tau_h: float = 0.1
    lam: float = 0.5
    gae_discount: str = "paper"
    soft_rate: float = 0.01
    buffer_capacity: int = 100_000
    replay_batches: int = 32
    batch_size: int = 32
    per_alpha: float = 0.6
    per_beta: float = 0.4
    rho_clip: float = 1.3
    width: int = 100
    depth: int = 5
    n_heads: int = 5
    episodes: int = 100
    seed: int = 0
    out: str = "runs/default"
    checkpoint_every: int = 50
    record_wall_time: bool = False

    def __post_init__(self):
        self.eta = parse_eta(self.eta)
        AgentMode(self.mode, self.eta, self.rho_clip)
        if self.gae_discount not in ("paper", "standard"):
            raise ValueError("gae_discount must be 'paper' or 'standard'")

    def to_text(self) -> str:
        lines = ["# run configuration"]
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)!r}" if isinstance(getattr(self, f.name), float)
                         else f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "RunConfig":
        values = parse_config_text(text)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key == "lambda":
                key = "lam"
            if key not in types:
                raise ValueError(f"unknown configuration key {key!r}")
            kwargs[key] = _coerce(types[key], raw)
        return cls(**kwargs)


def parse_eta(value) -> float:
    if isinstance(value, str):
        value = value.strip().lower()
        if value in ("zero", "0", "none"):
            return 0.0
        value = float(value)
    value = float(value)
    if not (value == 0.0 or 0.0 < value < 1.0):
        raise ValueError(f"eta must be 'zero' or lie in (0, 1), got {value}")
    return value


def _coerce(type_name, raw):
    if not isinstance(raw, str):
        return raw
    if type_name in ("bool", bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if type_name in ("int", int):
        return int(float(raw)) if "e" in raw.lower() else int(raw)
    if type_name in ("float", float):
        return parse_eta(raw) if raw.lower() == "zero" else float(raw)
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def load_config(path, **overrides) -> RunConfig:
    return RunConfig.from_text(Path(path).read_text(), **overrides)


class MetricsWriter:
    """Append-only CSV; the header is written only when the file is new or empty."""

    def __init__(self, path, columns=METRIC_COLUMNS):
        self.path = Path(path)
        self.columns = columns
        if not self.path.exists() or self.path.stat().st_size == 0:
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(columns)

    def write(self, row: dict) -> None:
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row[c]) for c in self.columns])
            fh.flush()
            os.fsync(fh.fileno())


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_metrics(path) -> dict[str, np.ndarray]:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in (rows[0].keys() if rows else ())}


def _policy_network(env) -> PolicyNetwork:
    spec = env.spec
    if spec.discrete:
        return PolicyNetwork("categorical", spec.n_actions)
    return PolicyNetwork("gaussian", spec.action_dim)


class Trainer:
    """Mutable state of one training run."""

    def __init__(self, config: RunConfig, on_event: Callable[[str, dict], None] | None = None):
        self.config = c = config
        seeds = np.random.SeedSequence(c.seed).spawn(4)
        init_rng, self.env_rng, self.action_rng, self.replay_rng = (np.random.default_rng(s) for s in seeds)
        self.env = make_env(c.env)
        self.nets = Networks.create(self.env.spec.state_dim, _policy_network(self.env), init_rng,
                                    c.width, c.depth, c.n_heads)
        self.value_opt = Adam(self.nets.value.size, c.lr)
        self.policy_opt = Adam(self.nets.policy.size, c.lr)
        self.mode = AgentMode(c.mode, c.eta, c.rho_clip)
        # Reverse modes keep a zero-optimism scheduler only to report the error scale.
        self.scheduler = OptimismScheduler(c.eta if self.mode.optimistic else 0.0, c.beta, c.epsilon)
        self.buffer = ReplayBuffer(c.buffer_capacity, c.per_alpha, c.per_beta, c.epsilon)
        self.priority_rule = FKL_PRIORITY if self.mode.optimistic else RKL_PRIORITY
        self.trace = TraceState.zeros(self.nets.value.size, self.nets.policy.size, c.lam, c.gamma,
                                      c.gae_discount)
        self.on_event = on_event or (lambda name, info: None)
        self.clamp_events = 0

    def _apply(self, value_grad, policy_grad) -> None:
        self.value_opt.step(self.nets.value, value_grad)
        self.policy_opt.step(self.nets.policy, policy_grad)
        soft_update(self.nets.target_value, self.nets.value, self.config.soft_rate)
        soft_update(self.nets.target_policy, self.nets.policy, self.config.soft_rate)

    def run_episode(self) -> dict:
        c, nets = self.config, self.nets
        self.trace.reset()
        state = self.env.reset(self.env_rng)
        total, abs_deltas, log_pis = 0.0, [], []
        while not self.env.done:
            behavior = nets.policy_net.forward(nets.target_policy, state)
            action = behavior.sample(self.action_rng)
            behavior_logp = float(behavior.log_prob(action))
            next_state, reward, terminal = self.env.step(action)
            shaped = entropy_bonus(reward, behavior_logp, c.tau_h)
            batch = UpdateBatch(state, action, next_state, shaped, terminal, behavior_logp)
            update, grad_v, grad_pi = transition_gradients(batch, nets, self.mode, c.gamma, self.scheduler)
            self.on_event("tau_update", {"phase": "online"})
            self.clamp_events += exponent_clamped(update.deltas, update.tau)
            dv, dp = self.trace.step(grad_v, grad_pi, float(update.errors[0]))
            self.on_event("online_update", {"trace": True})
            self._apply(dv, dp)
            delta = float(update.deltas[0])
            self.buffer.push(Transition(state, action, next_state, shaped, terminal, behavior_logp, delta))
            self.on_event("push", {"behavior_log_prob": behavior_logp})
            total += reward
            abs_deltas.append(abs(delta))
            log_pis.append(float(update.log_probs[0]))
            state = next_state
        return {"return": total, "mean_abs_delta": float(np.mean(abs_deltas)),
                "mean_log_pi": float(np.mean(log_pis))}

    def replay_phase(self) -> None:
        c = self.config
        for _ in range(c.replay_batches):
            idx, weights = self.buffer.sample(c.batch_size, self.priority_rule, self.scheduler.tau,
                                              self.replay_rng)
            generations = self.buffer.generations_of(idx)
            batch = UpdateBatch.from_records(self.buffer.batch(idx))
            update = compute_update(batch, self.nets, self.mode, c.gamma, self.scheduler,
                                    sample_weights=weights)
            self.on_event("tau_update", {"phase": "replay"})
            self.clamp_events += exponent_clamped(update.deltas, update.tau)
            self.on_event("replay_update", {"trace": False, "per": True})
            self._apply(update.value_grad, update.policy_grad)
            self.buffer.update_priorities(idx, update.deltas, generations)
            self.on_event("priorities_refreshed", {"n": len(idx)})

    def checkpoint(self, path) -> None:
        meta = {"config": dataclasses.asdict(self.config), "policy_kind": self.nets.policy_net.kind,
                "action_dim": self.nets.policy_net.action_dim}
        save_checkpoint(path, self.nets.as_dict(), meta)


def train(config: RunConfig, on_event: Callable[[str, dict], None] | None = None) -> Path:
    """Run one configuration; returns the run directory.

    The directory holds ``metrics.csv`` (one row per episode, appended as it goes),
    ``config.txt``, ``metadata.json`` and ``checkpoint.json``.
    """
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.to_text())
    metrics_path = out / "metrics.csv"
    if metrics_path.exists():
        metrics_path.unlink()
    writer = MetricsWriter(metrics_path)
    trainer = Trainer(config, on_event)
    meta = {"config": dataclasses.asdict(config), "status": "running", "events": []}
    start = time.perf_counter()
    try:
        for episode in range(config.episodes):
            t0 = time.perf_counter()
            stats = trainer.run_episode()
            trainer.replay_phase()
            if not all(math.isfinite(v) for v in stats.values()):
                raise NonFiniteGradient(f"non-finite episode statistics {stats}")
            wall = (time.perf_counter() - t0) * 1e3 if config.record_wall_time else 0.0
            writer.write({"episode": episode, **stats, "tau": trainer.scheduler.tau,
                          "delta_scale": trainer.scheduler.delta_scale, "wall_ms": round(wall, 3)})
            if config.checkpoint_every and (episode + 1) % config.checkpoint_every == 0:
                trainer.checkpoint(out / "checkpoint.json")
    except (NonFiniteGradient, FloatingPointError) as exc:
        meta.update(status="numerical_abort", error=str(exc))
        meta["events"].append({"episode": episode, "error": str(exc)})
        _write_meta(out, meta, trainer, start)
        raise NumericalAbort(str(exc)) from exc
    trainer.checkpoint(out / "checkpoint.json")
    meta["status"] = "completed"
    _write_meta(out, meta, trainer, start)
    return out


def _write_meta(out: Path, meta: dict, trainer: Trainer, start: float) -> None:
    meta["exponent_clamp_events"] = int(trainer.clamp_events)
    meta["runtime_s"] = time.perf_counter() - start
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, default=str))


def load_networks(checkpoint) -> tuple[Networks, dict]:
    params, meta = load_checkpoint(checkpoint)
    policy_net = PolicyNetwork(meta["policy_kind"], meta["action_dim"])
    nets = Networks(policy_net, params["value"], params["policy"], params["target_value"],
                    params["target_policy"])
    return nets, meta


def evaluate(checkpoint, env_id: str | None = None, episodes: int = 100, seed: int = 0,
             out=None) -> list[dict]:
    """Roll out the main policy ``pi`` (not the behavior copy); one row per episode."""
    nets, meta = load_networks(checkpoint)
    cfg = meta["config"]
    env = make_env(env_id or cfg["env"])
    expected = _policy_network(env)
    if (env.spec.state_dim != nets.value.input_dim or expected.kind != nets.policy_net.kind
            or expected.head_dim != nets.policy.output_dim):
        raise ValueError("checkpoint architecture does not match the environment")
    gamma = cfg["gamma"]
    env_rng, act_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    rows = []
    for ep in range(episodes):
        state = env.reset(env_rng)
        total, abs_deltas, log_pis = 0.0, [], []
        while not env.done:
            dist = nets.policy_net.forward(nets.policy, state)
            action = dist.sample(act_rng)
            log_pis.append(float(dist.log_prob(action)))
            next_state, reward, terminal = env.step(action)
            v = _mean_value(nets.value, state)
            v_next = 0.0 if terminal else _mean_value(nets.target_value, next_state)
            abs_deltas.append(abs(reward + gamma * v_next - v))
            total += reward
            state = next_state
        rows.append({"episode": ep, "return": total, "mean_abs_delta": float(np.mean(abs_deltas)),
                     "mean_log_pi": float(np.mean(log_pis))})
    if out is not None:
        path = Path(out)
        if path.exists():
            path.unlink()
        writer = MetricsWriter(path, EVAL_COLUMNS)
        for row in rows:
            writer.write(row)
    return rows


def _mean_value(params, state) -> float:
    from .approximator import value_forward
    return float(value_forward(params, state).mean_value)


def greedy_rollout(nets: Networks, env, seed: int = 0) -> tuple[float, object]:
    """Follow the most likely action of ``pi``; returns ``(return, env)`` for inspection."""
    state = env.reset(np.random.default_rng(seed))
    total = 0.0
    while not env.done:
        action = nets.policy_net.forward(nets.policy, state).mode()
        state, reward, _ = env.step(action)
        total += reward
    return total, env


def greedy_probe_env(env_id: str):
    # The grid probe removes slip so the result reflects the policy, not luck.
    return DistractorGrid(slip=0.0) if env_id == "grid" else make_env(env_id)


def reaches_far_exit(checkpoint) -> bool:
    nets, _ = load_networks(checkpoint)
    _, env = greedy_rollout(nets, DistractorGrid(slip=0.0))
    return env.pos == DistractorGrid.FAR


def _run_one(config: RunConfig) -> dict:
    row = {"eta": "zero" if config.eta == 0.0 else config.eta, "seed": config.seed}
    try:
        out = train(config)
    except Exception as exc:  # recorded, the sweep continues
        log.warning("run eta=%s seed=%s failed: %s", config.eta, config.seed, exc)
        return {**row, "status": f"failed: {exc}", "final_median_return": math.nan,
                "final_mean_abs_delta": math.nan, "final_mean_log_pi": math.nan,
                "final_tau": math.nan, "greedy_return": math.nan}
    m = read_metrics(out / "metrics.csv")
    tail = slice(-FINAL_WINDOW, None)
    nets, _ = load_networks(out / "checkpoint.json")
    greedy, _ = greedy_rollout(nets, greedy_probe_env(config.env), seed=config.seed)
    return {**row, "status": "completed",
            "final_median_return": float(np.median(m["return"][tail])),
            "final_mean_abs_delta": float(np.mean(m["mean_abs_delta"][tail])),
            "final_mean_log_pi": float(np.mean(m["mean_log_pi"][tail])),
            "final_tau": float(m["tau"][-1]), "greedy_return": greedy}


def sweep_configs(base: RunConfig, etas, seeds) -> list[RunConfig]:
    configs = []
    for eta in etas:
        eta = parse_eta(eta)
        label = "zero" if eta == 0.0 else f"{eta:g}"
        for seed in seeds:
            out = Path(base.out) / f"eta_{label}" / f"seed_{seed}"
            configs.append(dataclasses.replace(base, eta=eta, seed=int(seed), out=str(out)))
    return configs


def sweep(base: RunConfig, etas, seeds, workers: int | None = None) -> Path:
    """Train the ``etas x seeds`` grid and write ``summary.csv`` under ``base.out``."""
    if not etas or not seeds:
        raise ValueError("etas and seeds must be non-empty")
    configs = sweep_configs(base, etas, seeds)
    workers = workers or os.cpu_count() or 1
    if workers == 1:
        rows = [_run_one(c) for c in configs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_one, configs))
    Path(base.out).mkdir(parents=True, exist_ok=True)
    summary = Path(base.out) / "summary.csv"
    if summary.exists():
        summary.unlink()
    writer = MetricsWriter(summary, SUMMARY_COLUMNS)
    for row in rows:
        writer.write(row)
    return summary
