"""Layers built on the tensor kernel: batch norm, bi-LSTM, parameter sets."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .tensor import Tensor, concat, index, linear, mul, sigmoid, stack, tanh, tsum, add

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ParamSet:
    """Named parameters; gradients live in each tensor's ``.grad``."""

    def __init__(self, params: dict[str, Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        for k, v in (params or {}).items():
            self.add(k, v)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def get(self, name: str, default=None):
        return self._params.get(name, default)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self._params.items()}

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())


@dataclass
class RunningStats:
    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    momentum: float = BN_MOMENTUM

    @property
    def initialized(self) -> bool:
        return self.mean is not None


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
    train: bool = True,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalisation over every axis but the last."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: gamma/beta must have shape ({c},)")
    xd = x.data
    axes = tuple(range(xd.ndim - 1))
    m = xd.size // c
    if train:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        unbiased = var * m / max(m - 1, 1)
        if running.initialized:
            running.mean = (1 - running.momentum) * running.mean + running.momentum * mu
            running.var = (1 - running.momentum) * running.var + running.momentum * unbiased
        else:
            # first batch seeds the running statistics
            running.mean = mu.copy()
            running.var = unbiased.copy()
    else:
        if not running.initialized:
            raise ValueError("batch_norm: eval mode needs initialised running statistics")
        mu, var = running.mean, running.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data
    y = xhat * gd + beta.data

    def back(g):
        gh = g * gd
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        if train:
            gx = inv / m * (m * gh - gh.sum(axis=axes) - xhat * (gh * xhat).sum(axis=axes))
        else:
            gx = gh * inv
        return gx, ggamma, gbeta

    return Tensor._result(y, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# LSTM


def lstm_param_shapes(d_in: int, hidden: int, layers: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for layer in range(layers):
        width = d_in if layer == 0 else 2 * hidden
        for direction in ("fw", "bw"):
            p = f"lstm.{layer}.{direction}"
            shapes[f"{p}.w_ih"] = (4 * hidden, width)
            shapes[f"{p}.w_hh"] = (4 * hidden, hidden)
            shapes[f"{p}.b"] = (4 * hidden,)
    return shapes


def init_lstm(params: ParamSet, d_in: int, hidden: int, layers: int, rng: np.random.Generator, dtype=np.float64):
    """Forget-gate bias 1.0, everything else uniform in ±1/sqrt(H). Gate order is (i, f, g, o)."""
    bound = 1.0 / np.sqrt(hidden)
    for name, shape in lstm_param_shapes(d_in, hidden, layers).items():
        w = rng.uniform(-bound, bound, size=shape)
        if name.endswith(".b"):
            w[hidden:2 * hidden] = 1.0
        params.add(name, w.astype(dtype))


def _reverse_index(lengths: np.ndarray, T: int) -> np.ndarray:
    t = np.arange(T)[None, :]
    L = lengths[:, None]
    return np.where(t < L, L - 1 - t, t)


def _lstm_direction(x: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor, hidden: int) -> Tensor:
    B, T, _ = x.shape
    xw = linear(x, w_ih, b)
    h = Tensor(np.zeros((B, hidden), dtype=x.dtype))
    c = Tensor(np.zeros((B, hidden), dtype=x.dtype))
    outs = []
    for t in range(T):
        z = add(xw[:, t, :], linear(h, w_hh))
        i = sigmoid(z[:, :hidden])
        f = sigmoid(z[:, hidden:2 * hidden])
        g = tanh(z[:, 2 * hidden:3 * hidden])
        o = sigmoid(z[:, 3 * hidden:])
        c = add(mul(f, c), mul(i, g))
        h = mul(o, tanh(c))
        outs.append(h)
    return stack(outs, axis=1)


def bilstm_encode(
    words: Tensor,
    params: ParamSet,
    layers: int = 3,
    hidden: int = 512,
    lengths=None,
    prefix: str = "lstm",
) -> Tensor:
    """Stacked bidirectional LSTM; returns the time-average of the last layer's outputs.

    ``words`` is [l, d] for one sentence or [B, T, d] for a padded batch with
    per-row ``lengths``. Output is [2H] or [B, 2H].
    """
    single = words.ndim == 2
    if single:
        words = words.reshape(1, *words.shape)
    B, T, _ = words.shape
    if T < 1:
        raise ValueError("bilstm_encode: empty token sequence")
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    if (lengths < 1).any() or (lengths > T).any():
        raise ValueError(f"bilstm_encode: lengths {lengths} outside [1, {T}]")
    rev = _reverse_index(lengths, T)
    rows = np.arange(B)[:, None]
    x = words
    for layer in range(layers):
        p = f"{prefix}.{layer}"
        fw = _lstm_direction(x, params[f"{p}.fw.w_ih"], params[f"{p}.fw.w_hh"], params[f"{p}.fw.b"], hidden)
        xr = index(x, (rows, rev))
        bw = _lstm_direction(xr, params[f"{p}.bw.w_ih"], params[f"{p}.bw.w_hh"], params[f"{p}.bw.b"], hidden)
        bw = index(bw, (rows, rev))
        x = concat([fw, bw], axis=-1)
    valid = (np.arange(T)[None, :] < lengths[:, None]).astype(x.dtype)[:, :, None]
    avg = mul(tsum(mul(x, valid), axis=1), 1.0 / lengths[:, None].astype(x.dtype))
    return avg[0] if single else avg


@dataclass
class LayerStats:
    """Bookkeeping of running statistics keyed by layer name."""

    stats: dict[str, RunningStats] = field(default_factory=dict)

    def get(self, name: str) -> RunningStats:
        if name not in self.stats:
            self.stats[name] = RunningStats()
        return self.stats[name]
