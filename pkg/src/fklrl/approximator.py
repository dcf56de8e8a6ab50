"""Numpy value and policy networks with hand-written backprop, Adam and soft updates.

Both networks share one trunk layout: ``depth`` blocks of
(fully connected -> layer norm -> swish) followed by a linear head.  All
parameters live in a single flat float64 vector; per-layer arrays are views into
it, so optimizers and target updates work on the flat vector in place.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1
LAYER_NORM_EPS = 1e-5
LOG_2PI = math.log(2.0 * math.pi)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def swish(x):
    return x * sigmoid(x)


def softplus(x):
    return np.logaddexp(0.0, x)


class MlpParams:
    """Flat parameter vector plus the named views into it.

    Ordering is fixed: for each hidden block ``W, b, gain, offset``, then
    ``head_W, head_b``.
    """

    def __init__(self, input_dim: int, width: int, depth: int, output_dim: int,
                 flat: np.ndarray | None = None):
        self.input_dim = input_dim
        self.width = width
        self.depth = depth
        self.output_dim = output_dim
        self.layout: list[tuple[str, tuple[int, ...]]] = []
        fan_in = input_dim
        for i in range(depth):
            self.layout += [(f"W{i}", (fan_in, width)), (f"b{i}", (width,)),
                            (f"gain{i}", (width,)), (f"offset{i}", (width,))]
            fan_in = width
        self.layout += [("head_W", (fan_in, output_dim)), ("head_b", (output_dim,))]
        self._spans, pos = [], 0
        for name, shape in self.layout:
            n = math.prod(shape)
            self._spans.append((name, pos, pos + n, shape))
            pos += n
        self.size = pos
        if flat is None:
            flat = np.zeros(self.size)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got shape {flat.shape}")
        self.flat = flat
        self.arrays = self._views(self.flat)

    def _views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        return {name: flat[lo:hi].reshape(shape) for name, lo, hi, shape in self._spans}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def architecture(self) -> dict:
        return {"input_dim": self.input_dim, "width": self.width,
                "depth": self.depth, "output_dim": self.output_dim}

    def flatten(self) -> np.ndarray:
        return self.flat.copy()

    def unflatten(self, flat: np.ndarray) -> "MlpParams":
        return MlpParams(self.input_dim, self.width, self.depth, self.output_dim,
                         np.array(flat, dtype=np.float64))

    def copy(self) -> "MlpParams":
        return self.unflatten(self.flat)

    def init(self, rng: np.random.Generator, head_scale: float = 0.01) -> "MlpParams":
        """Variance-scaled uniform weights, unit gains, zero biases and offsets."""
        for name, shape in self.layout:
            arr = self.arrays[name]
            if name.startswith("gain"):
                arr[...] = 1.0
            elif name.startswith("W") or name == "head_W":
                limit = math.sqrt(3.0 / shape[0])
                if name == "head_W":
                    limit *= head_scale
                arr[...] = rng.uniform(-limit, limit, size=shape)
            else:
                arr[...] = 0.0
        return self


@dataclass
class _Cache:
    inputs: list
    xhat: list
    inv_std: list
    pre_act: list


def _row_mean(x: np.ndarray) -> np.ndarray:
    return np.add.reduce(x, axis=-1, keepdims=True) / x.shape[-1]


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, _Cache]:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[-1] != params.input_dim:
        raise ValueError(f"expected input dimension {params.input_dim}, got {x.shape[-1]}")
    cache = _Cache([], [], [], [])
    h = x
    for i in range(params.depth):
        cache.inputs.append(h)
        z = h @ params[f"W{i}"] + params[f"b{i}"]
        zc = z - _row_mean(z)
        inv_std = 1.0 / np.sqrt(_row_mean(zc * zc) + LAYER_NORM_EPS)
        xhat = zc * inv_std
        y = params[f"gain{i}"] * xhat + params[f"offset{i}"]
        cache.xhat.append(xhat)
        cache.inv_std.append(inv_std)
        cache.pre_act.append(y)
        h = swish(y)
    cache.inputs.append(h)
    return h @ params["head_W"] + params["head_b"], cache


def mlp_backward(params: MlpParams, cache: _Cache, d_out: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(d_out * output)`` with respect to the flat parameters."""
    grad = np.zeros(params.size)
    g = params._views(grad)
    d_out = np.atleast_2d(d_out)
    h = cache.inputs[-1]
    g["head_W"][...] = h.T @ d_out
    g["head_b"][...] = d_out.sum(axis=0)
    dh = d_out @ params["head_W"].T
    for i in reversed(range(params.depth)):
        y = cache.pre_act[i]
        s = sigmoid(y)
        dy = dh * (s + y * s * (1.0 - s))
        xhat = cache.xhat[i]
        g[f"gain{i}"][...] = (dy * xhat).sum(axis=0)
        g[f"offset{i}"][...] = dy.sum(axis=0)
        dxhat = dy * params[f"gain{i}"]
        dz = cache.inv_std[i] * (dxhat - _row_mean(dxhat) - xhat * _row_mean(dxhat * xhat))
        h_in = cache.inputs[i]
        g[f"W{i}"][...] = h_in.T @ dz
        g[f"b{i}"][...] = dz.sum(axis=0)
        if i > 0:
            dh = dz @ params[f"W{i}"].T
    return grad


# -- value network ------------------------------------------------------------

@dataclass
class ValueHeads:
    head_values: np.ndarray  # (..., n_heads)

    @property
    def mean_value(self):
        return self.head_values.mean(axis=-1)


def make_value_params(input_dim: int, rng: np.random.Generator, width: int = 100,
                      depth: int = 5, n_heads: int = 5) -> MlpParams:
    return MlpParams(input_dim, width, depth, n_heads).init(rng)


def value_forward(params: MlpParams, state) -> ValueHeads:
    out, _ = mlp_forward(params, state)
    if np.ndim(state) == 1:
        out = out[0]
    return ValueHeads(out)


def value_backprop(params: MlpParams, states, seeds) -> np.ndarray:
    """Sum over samples of ``seed_i * grad mean_value(s_i)``."""
    out, cache = mlp_forward(params, states)
    seeds = np.asarray(seeds, dtype=np.float64).reshape(-1, 1)
    d_out = np.broadcast_to(seeds / params.output_dim, out.shape)
    return mlp_backward(params, cache, d_out)


# -- policy distributions -----------------------------------------------------

@dataclass
class DiagonalGaussian:
    mean: np.ndarray
    std: np.ndarray

    def log_prob(self, action) -> np.ndarray:
        z = (np.asarray(action, dtype=np.float64) - self.mean) / self.std
        return (-0.5 * LOG_2PI - np.log(self.std) - 0.5 * z * z).sum(axis=-1)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal(self.mean.shape)

    def mode(self) -> np.ndarray:
        return self.mean.copy()


@dataclass
class Categorical:
    logits: np.ndarray

    @property
    def log_probs(self) -> np.ndarray:
        m = self.logits.max(axis=-1, keepdims=True)
        shifted = self.logits - m
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def log_prob(self, action) -> np.ndarray:
        idx = np.asarray(action).astype(np.int64)
        if idx.ndim == self.logits.ndim:
            idx = idx[..., 0]
        return np.take_along_axis(self.log_probs, idx[..., None], axis=-1)[..., 0]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        p = self.probs
        u = rng.random(p.shape[:-1] + (1,))
        idx = (np.cumsum(p, axis=-1) < u).sum(axis=-1, keepdims=True)
        return np.minimum(idx, p.shape[-1] - 1).astype(np.float64)

    def mode(self) -> np.ndarray:
        return np.argmax(self.logits, axis=-1)[..., None].astype(np.float64)


# Keeps std positive when softplus underflows; the derivative is unaffected.
STD_FLOOR = 1e-8


class PolicyNetwork:
    """Trunk plus a distribution head.

    ``kind="gaussian"``: the head emits ``(mean, raw_std)`` and ``std = softplus(raw_std)``.
    ``kind="categorical"``: the head emits logits; actions are stored as a length-1
    float vector holding the index.
    """

    def __init__(self, kind: str, action_dim: int):
        if kind not in ("gaussian", "categorical"):
            raise ValueError(f"unknown policy kind {kind!r}")
        self.kind = kind
        self.action_dim = action_dim

    @property
    def head_dim(self) -> int:
        return 2 * self.action_dim if self.kind == "gaussian" else self.action_dim

    def make_params(self, input_dim: int, rng: np.random.Generator, width: int = 100,
                    depth: int = 5) -> MlpParams:
        return MlpParams(input_dim, width, depth, self.head_dim).init(rng)

    def distribution(self, head_out: np.ndarray):
        if self.kind == "gaussian":
            k = self.action_dim
            return DiagonalGaussian(head_out[..., :k], softplus(head_out[..., k:]) + STD_FLOOR)
        return Categorical(head_out)

    def forward(self, params: MlpParams, state):
        out, _ = mlp_forward(params, state)
        if np.ndim(state) == 1:
            out = out[0]
        return self.distribution(out)

    def log_prob_backprop(self, params: MlpParams, states, actions, seeds):
        """Sum over samples of ``seed_i * grad ln pi(a_i | s_i)``; also returns ``ln pi``."""
        out, cache = mlp_forward(params, states)
        actions = np.asarray(actions, dtype=np.float64).reshape(out.shape[0], -1)
        seeds = np.asarray(seeds, dtype=np.float64).reshape(-1, 1)
        dist = self.distribution(out)
        d_out = self.log_prob_head_grad(dist, out, actions)
        return mlp_backward(params, cache, seeds * d_out), dist.log_prob(actions)

    def log_prob_head_grad(self, dist, head_out: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Per-sample ``d ln pi(a | s) / d head_out`` for a batch."""
        if self.kind == "gaussian":
            k = self.action_dim
            diff = actions - dist.mean
            var = dist.std * dist.std
            d_std = -1.0 / dist.std + diff * diff / (var * dist.std)
            return np.concatenate([diff / var, d_std * sigmoid(head_out[:, k:])], axis=1)
        onehot = np.zeros_like(head_out)
        onehot[np.arange(head_out.shape[0]), actions[:, 0].astype(np.int64)] = 1.0
        return onehot - dist.probs


def log_prob(dist, action):
    out = dist.log_prob(action)
    return float(out) if np.ndim(out) == 0 else out


def sample(dist, rng: np.random.Generator) -> np.ndarray:
    return dist.sample(rng)


# -- optimisation ---------------------------------------------------------------

class NonFiniteGradient(FloatingPointError):
    pass


class Adam:
    """Bias-corrected adaptive-moment descent on a flat parameter vector."""

    def __init__(self, size: int, lr: float = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: MlpParams, grad: np.ndarray) -> MlpParams:
        if grad.shape != self.m.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match {self.m.shape}")
        if not np.all(np.isfinite(grad)):
            bad = int(np.count_nonzero(~np.isfinite(grad)))
            raise NonFiniteGradient(f"{bad} non-finite gradient entries at step {self.t + 1}")
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params.flat -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


def optimizer_step(opt: Adam, params: MlpParams, grad: np.ndarray) -> MlpParams:
    return opt.step(params, grad)


def soft_update(target: MlpParams, main: MlpParams, rate: float) -> MlpParams:
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"rate must lie in (0, 1], got {rate}")
    if target.size != main.size:
        raise ValueError("architectures differ")
    if rate == 1.0:
        target.flat[...] = main.flat
    else:
        target.flat *= 1.0 - rate
        target.flat += rate * main.flat
    return target


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, networks: dict[str, MlpParams], metadata: dict | None = None) -> None:
    """Write named parameter sets as one JSON document.

    Floats go through ``repr`` so reloading is bit-exact.
    """
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "metadata": metadata or {},
        "networks": {
            name: {"architecture": p.architecture(), "params": p.flat.tolist()}
            for name, p in networks.items()
        },
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, MlpParams], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    networks = {}
    for name, entry in doc["networks"].items():
        a = entry["architecture"]
        networks[name] = MlpParams(a["input_dim"], a["width"], a["depth"], a["output_dim"],
                                   np.array(entry["params"], dtype=np.float64))
    return networks, doc["metadata"]
