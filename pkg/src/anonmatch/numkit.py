"""Dense network kernel used by every learner.

An :class:`Mlp` holds a stack of ``members`` independent networks that share
one topology.  Every parameter array carries the member index as its leading
axis, so a population of independent learners can be evaluated and trained
with one batched matrix product per layer.  A single network is simply a stack
with one member; the weight matrix of member ``m`` in layer ``l`` is
``net.weights[l][m]`` with shape ``(layer_sizes[l + 1], layer_sizes[l])``.

Inputs are accepted as ``(in,)`` or ``(batch, in)`` for a single-member stack
and as ``(members, batch, in)`` in general.  Outputs mirror the input layout.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, ContractError, TrainingError

CHECKPOINT_VERSION = 1


@dataclass
class Mlp:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    heads: dict[str, slice]
    dropout_rate: float = 0.0

    @property
    def members(self) -> int:
        return self.weights[0].shape[0]

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        """Parameter count of one member."""
        return sum(w[0].size + b[0].size for w, b in zip(self.weights, self.biases))

    def head(self, out: np.ndarray, name: str) -> np.ndarray:
        if name not in self.heads:
            raise ContractError(f"network has no head {name!r}")
        return out[..., self.heads[name]]

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> Mlp:
        return Mlp(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            dict(self.heads),
            self.dropout_rate,
        )

    def load_from(self, other: Mlp) -> None:
        """Overwrite parameters in place with those of ``other``."""
        for dst, src in zip(self.params(), other.params()):
            np.copyto(dst, src)

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params())


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def all_finite(self) -> bool:
        return all(np.isfinite(g).all() for g in self.arrays())


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    decay: float = 0.99
    eps: float = 1e-8
    first: list[np.ndarray] = field(default_factory=list)
    second: list[np.ndarray] = field(default_factory=list)
    steps: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))


def _resolve_heads(heads: Mapping[str, int] | None, out_dim: int) -> dict[str, slice]:
    if heads is None:
        return {"out": slice(0, out_dim)}
    resolved = {}
    start = 0
    for name, size in heads.items():
        if size <= 0:
            raise ConfigError(f"head {name!r} must have positive size, got {size}")
        resolved[name] = slice(start, start + size)
        start += size
    if start != out_dim:
        raise ConfigError(f"heads cover {start} outputs but output dim is {out_dim}")
    return resolved


def mlp_init(
    layer_sizes,
    heads: Mapping[str, int] | None = None,
    dropout_rate: float = 0.0,
    seed: int | np.random.Generator = 0,
    members: int = 1,
) -> Mlp:
    """Create a stack of rectifier MLPs.

    Weights are uniform in ``±1/sqrt(fan_in)``, biases zero.  ``heads`` maps
    head names to sizes, laid out in insertion order over the output vector.
    """
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or min(sizes) <= 0:
        raise ConfigError(f"need at least two positive layer sizes, got {sizes}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")
    if members < 1:
        raise ConfigError("members must be >= 1")
    resolved = _resolve_heads(heads, sizes[-1])
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(members, fan_out, fan_in)))
        biases.append(np.zeros((members, fan_out)))
    return Mlp(sizes, weights, biases, resolved, float(dropout_rate))


def _to_stack(net: Mlp, x) -> tuple[np.ndarray, tuple[int, ...]]:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.input_dim:
        raise ContractError(f"input dim {x.shape[-1]} != network input dim {net.input_dim}")
    if x.ndim == 3:
        if x.shape[0] != net.members:
            raise ContractError(f"input has {x.shape[0]} member rows, network has {net.members}")
        return x, x.shape[:-1]
    if net.members == 1 and x.ndim in (1, 2):
        lead = x.shape[:-1]
        return x.reshape(1, -1, net.input_dim), lead
    raise ContractError(f"cannot broadcast input of shape {x.shape} over {net.members} members")


def _dropout_rng(dropout_seed) -> np.random.Generator:
    if isinstance(dropout_seed, np.random.Generator):
        return dropout_seed
    return np.random.default_rng(dropout_seed)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    masks: list[np.ndarray | None]
    lead_shape: tuple[int, ...]


def forward_cached(net: Mlp, x, train_mode: bool = False, dropout_seed=None):
    """Forward pass that also returns the activations needed by the backward pass."""
    a, lead = _to_stack(net, x)
    n_layers = len(net.weights)
    use_dropout = train_mode and net.dropout_rate > 0.0
    rng = _dropout_rng(dropout_seed) if use_dropout else None
    keep = 1.0 - net.dropout_rate
    inputs, preacts, masks = [], [], []
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(a)
        z = np.matmul(a, w.transpose(0, 2, 1)) + b[:, None, :]
        preacts.append(z)
        if l == n_layers - 1:
            a = z
            masks.append(None)
            break
        a = np.maximum(z, 0.0)
        # dropout sits between consecutive hidden layers only
        if use_dropout and l < n_layers - 2:
            mask = (rng.random(a.shape) < keep) / keep
            a = a * mask
            masks.append(mask)
        else:
            masks.append(None)
    return a, ForwardCache(inputs, preacts, masks, lead)


def _restore(net: Mlp, out: np.ndarray, lead: tuple[int, ...]) -> np.ndarray:
    if net.members == 1 and len(lead) < 2:
        return out.reshape(*lead, out.shape[-1])
    return out


def forward(net: Mlp, x, train_mode: bool = False, dropout_seed=None) -> np.ndarray:
    out, cache = forward_cached(net, x, train_mode, dropout_seed)
    return _restore(net, out, cache.lead_shape)


def backward_cached(net: Mlp, cache: ForwardCache, upstream) -> Gradients:
    """Reverse-mode gradients of ``sum(upstream * output)`` from a forward cache."""
    delta = np.asarray(upstream, dtype=float)
    expected = cache.preacts[-1].shape
    if delta.shape != expected:
        try:
            delta = delta.reshape(expected)
        except ValueError:
            raise ContractError(f"upstream shape {delta.shape} incompatible with output {expected}") from None
    n_layers = len(net.weights)
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    for l in range(n_layers - 1, -1, -1):
        grad_w[l] = np.matmul(delta.transpose(0, 2, 1), cache.inputs[l])
        grad_b[l] = delta.sum(axis=1)
        if l == 0:
            break
        delta = np.matmul(delta, net.weights[l])
        if cache.masks[l - 1] is not None:
            delta = delta * cache.masks[l - 1]
        delta = delta * (cache.preacts[l - 1] > 0.0)
    return Gradients(grad_w, grad_b)


def backward(net: Mlp, x, upstream, train_mode: bool = False, dropout_seed=None) -> Gradients:
    """Gradients of ``sum(upstream * forward(net, x))`` w.r.t. all parameters.

    When ``train_mode`` is on, pass the same ``dropout_seed`` as the paired
    forward call so the same units are dropped.
    """
    _, cache = forward_cached(net, x, train_mode, dropout_seed)
    return backward_cached(net, cache, upstream)


def zeros_like_grads(net: Mlp) -> Gradients:
    return Gradients([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])


def make_optimizer(net: Mlp, kind: str, learning_rate: float, **kwargs) -> OptimizerState:
    if kind not in ("adam", "rmsprop", "sgd"):
        raise ConfigError(f"unknown optimizer {kind!r}")
    if learning_rate <= 0:
        raise ConfigError("learning_rate must be positive")
    state = OptimizerState(kind, float(learning_rate), **kwargs)
    state.first = [np.zeros_like(p) for p in net.params()] if kind == "adam" else []
    state.second = [np.zeros_like(p) for p in net.params()] if kind in ("adam", "rmsprop") else []
    state.steps = np.zeros(net.members, dtype=np.int64)
    return state


def take_members(net: Mlp, idx) -> Mlp:
    """Copy of the selected members as a smaller stack."""
    return Mlp(net.layer_sizes, [w[idx] for w in net.weights], [b[idx] for b in net.biases],
               dict(net.heads), net.dropout_rate)


def optimizer_step(net: Mlp, grads: Gradients, state: OptimizerState, member_mask=None, members=None) -> None:
    """Apply one update in place.

    ``member_mask`` (bool per member) restricts the update, including the
    accumulators and step counters, to the selected members.  Alternatively
    ``members`` lists member indices and ``grads`` holds gradients for just
    those members (as computed on :func:`take_members`).
    """
    g_arrays = grads.arrays()
    params = net.params()
    if members is not None:
        idx = np.asarray(members, dtype=np.int64)
        expected = [(len(idx),) + p.shape[1:] for p in params]
        if len(g_arrays) != len(params) or any(g.shape != e for g, e in zip(g_arrays, expected)):
            raise ContractError("member gradients are not shape-congruent with the selected members")
        if len(idx) == 0:
            return
        return _apply(net, g_arrays, state, idx)
    if len(g_arrays) != len(params) or any(g.shape != p.shape for g, p in zip(g_arrays, params)):
        raise ContractError("gradients are not shape-congruent with the network")
    idx = None
    if member_mask is not None:
        mask = np.asarray(member_mask, dtype=bool)
        if not mask.any():
            return
        if not mask.all():
            idx = np.flatnonzero(mask)
    if idx is not None:
        g_arrays = [g[idx] for g in g_arrays]
    _apply(net, g_arrays, state, idx)


def _apply(net: Mlp, g_arrays: list[np.ndarray], state: OptimizerState, idx) -> None:
    params = net.params()
    if not all(np.isfinite(g).all() for g in g_arrays):
        raise TrainingError("non-finite gradient entries")

    if idx is None:
        state.steps += 1
        steps = state.steps
    else:
        state.steps[idx] += 1
        steps = state.steps[idx]
    lr = state.learning_rate
    if state.kind == "adam":
        t = steps.astype(float)
        step_size = lr * np.sqrt(1.0 - state.beta2**t) / (1.0 - state.beta1**t)
        eps_hat = state.eps * np.sqrt(1.0 - state.beta2**t)
    for i, (p, g) in enumerate(zip(params, g_arrays)):
        shape = (-1,) + (1,) * (p.ndim - 1)
        if state.kind == "sgd":
            update = lr * g
        elif state.kind == "rmsprop":
            v = state.second[i] if idx is None else state.second[i][idx]
            v *= state.decay
            v += (1.0 - state.decay) * (g * g)
            update = g / (np.sqrt(v) + state.eps)
            update *= lr
            if idx is not None:
                state.second[i][idx] = v
        else:
            m = state.first[i] if idx is None else state.first[i][idx]
            v = state.second[i] if idx is None else state.second[i][idx]
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * (g * g)
            # bias-corrected Adam, folded into the step size and epsilon
            denom = np.sqrt(v)
            denom += eps_hat.reshape(shape)
            update = m / denom
            update *= step_size.reshape(shape)
            if idx is not None:
                state.first[i][idx] = m
                state.second[i][idx] = v
        if idx is None:
            p -= update
        else:
            p[idx] -= update
    if not net.all_finite():
        raise TrainingError("non-finite parameters after optimizer step")


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def entropy(p, axis: int = -1):
    """Shannon entropy in nats, with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=float)
    if (p < 0).any():
        raise ContractError("entropy of a vector with negative entries")
    logs = np.log(np.where(p > 0, p, 1.0))
    h = -(p * logs).sum(axis=axis)
    return float(h) if np.ndim(h) == 0 else h


def grad_check(net: Mlp, x, loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]], step: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn`` maps the network output to ``(loss, dloss/doutput)``.  Dropout
    is ignored (evaluation mode).
    """
    out = forward(net, x)
    _, upstream = loss_fn(out)
    analytic = backward(net, x, upstream).arrays()
    worst = 0.0
    for p, g in zip(net.params(), analytic):
        flat = p.reshape(-1)
        g_flat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = loss_fn(forward(net, x))[0]
            flat[i] = orig - step
            minus = loss_fn(forward(net, x))[0]
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * step)
            err = abs(g_flat[i] - numeric) / max(1e-8, abs(g_flat[i]) + abs(numeric))
            worst = max(worst, err)
    return worst


def save_mlp(net: Mlp, path) -> None:
    """Write a versioned ``.npz`` checkpoint.

    Layout: ``meta`` holds a JSON string with ``version``, ``layer_sizes``,
    ``heads`` (name -> [start, stop]), ``dropout_rate`` and ``members``;
    arrays ``W0..W{L-1}`` have shape (members, out, in) and ``b0..`` shape
    (members, out), stored C-contiguous (row-major).
    """
    meta = {
        "version": CHECKPOINT_VERSION,
        "layer_sizes": list(net.layer_sizes),
        "heads": {k: [s.start, s.stop] for k, s in net.heads.items()},
        "dropout_rate": net.dropout_rate,
        "members": net.members,
    }
    arrays = {f"W{i}": np.ascontiguousarray(w) for i, w in enumerate(net.weights)}
    arrays.update({f"b{i}": np.ascontiguousarray(b) for i, b in enumerate(net.biases)})
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_mlp(path) -> Mlp:
    with np.load(path) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta.get('version')}")
        n = len(meta["layer_sizes"]) - 1
        weights = [data[f"W{i}"].copy() for i in range(n)]
        biases = [data[f"b{i}"].copy() for i in range(n)]
    heads = {k: slice(a, b) for k, (a, b) in meta["heads"].items()}
    return Mlp(tuple(meta["layer_sizes"]), weights, biases, heads, float(meta["dropout_rate"]))
