"""Small dense-network substrate with tape-based reverse-mode differentiation.

Everything runs in float64 on numpy arrays. A :class:`Tensor` records the
operation that produced it; :func:`gradients` walks that record backwards and
returns exact derivatives for a chosen set of leaf parameters.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError

ACTIVATIONS = ("identity", "relu", "sigmoid")
BCE_EPS = 1e-7


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "parents", "backward_fn")

    def __init__(self, data, parents: tuple = (), backward_fn: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other) -> Tensor:
        other = as_tensor(other)
        a_shape, b_shape = self.data.shape, other.data.shape
        return Tensor(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        return Tensor(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> Tensor:
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __matmul__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    @property
    def T(self) -> Tensor:
        return Tensor(self.data.T, (self,), lambda g: (g.T,))

    def __getitem__(self, index) -> Tensor:
        shape = self.data.shape

        def back(g):
            full = np.zeros(shape)
            if _is_fancy(index):
                np.add.at(full, index, g)
            else:
                full[index] = g
            return (full,)

        return Tensor(self.data[index], (self,), back)

    # -- element-wise -----------------------------------------------------
    def square(self) -> Tensor:
        a = self.data
        return Tensor(a * a, (self,), lambda g: (2.0 * a * g,))

    def relu(self) -> Tensor:
        mask = self.data > 0
        return Tensor(self.data * mask, (self,), lambda g: (g * mask,))

    def sigmoid(self) -> Tensor:
        s = _sigmoid(self.data)
        return Tensor(s, (self,), lambda g: (g * s * (1.0 - s),))

    def log(self) -> Tensor:
        a = self.data
        return Tensor(np.log(a), (self,), lambda g: (g / a,))

    def clip(self, lo: float, hi: float) -> Tensor:
        a = self.data
        inside = (a >= lo) & (a <= hi)
        return Tensor(np.clip(a, lo, hi), (self,), lambda g: (g * inside,))

    # -- reductions -------------------------------------------------------
    def sum(self) -> Tensor:
        shape = self.data.shape
        return Tensor(self.data.sum(), (self,), lambda g: (np.full(shape, float(g)),))

    def mean(self) -> Tensor:
        size = self.data.size
        shape = self.data.shape
        return Tensor(self.data.mean(), (self,), lambda g: (np.full(shape, float(g) / size),))

    def item(self) -> float:
        return float(self.data)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([p.data.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), back)


def gradients(loss: Tensor, params: "ParamSet") -> dict[str, np.ndarray]:
    """Exact gradients of a scalar ``loss`` with respect to every entry of ``params``.

    Parameters never touched by the loss get an all-zero gradient.
    """
    if loss.data.size != 1:
        raise ConfigError("gradients() needs a scalar loss")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return OrderedDict(
        (name, grads.get(id(p), np.zeros_like(p.data)).reshape(p.data.shape))
        for name, p in params.items()
    )


class ParamSet(OrderedDict):
    """Ordered ``name -> Tensor`` map of trainable leaves."""

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in self.items():
            v.data = snap[k].copy()

    def count(self) -> int:
        return int(sum(v.data.size for v in self.values()))


# -- layers -----------------------------------------------------------------


@dataclass
class DenseLayer:
    weights: Tensor
    bias: Tensor
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        w = self.weights.data
        if w.ndim != 2 or self.bias.data.shape != (w.shape[1],):
            raise ConfigError(f"weight {w.shape} and bias {self.bias.data.shape} disagree")

    @property
    def in_dim(self) -> int:
        return self.weights.data.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.data.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        z = as_tensor(x) @ self.weights + self.bias
        if self.activation == "relu":
            return z.relu()
        if self.activation == "sigmoid":
            return z.sigmoid()
        return z


@dataclass
class Mlp:
    layers: list[DenseLayer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("an Mlp needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ConfigError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    def __call__(self, x) -> Tensor:
        return forward(self, x)

    def params(self, prefix: str = "") -> ParamSet:
        out = ParamSet()
        for i, layer in enumerate(self.layers):
            out[f"{prefix}{i}.W"] = layer.weights
            out[f"{prefix}{i}.b"] = layer.bias
        return out


def forward(mlp: Mlp, X) -> Tensor:
    """Apply ``mlp`` row-wise to ``X`` (an ``n x d_in`` array or Tensor)."""
    x = as_tensor(X)
    if x.data.ndim != 2 or x.data.shape[1] != mlp.in_dim:
        raise ConfigError(f"input has shape {x.data.shape}, network expects {mlp.in_dim} columns")
    for layer in mlp.layers:
        x = layer(x)
    return x


def glorot_dense(rng: np.random.Generator, fan_in: int, fan_out: int, activation: str) -> DenseLayer:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    return DenseLayer(Tensor(w), Tensor(np.zeros(fan_out)), activation)


def init_mlp(
    dims: Sequence[int],
    activation: str = "relu",
    seed: int | np.random.Generator = 0,
    output_activation: str = "identity",
) -> Mlp:
    """Glorot-uniform weights and zero biases for a chain of dense layers.

    ``activation`` applies to every layer but the last, which uses
    ``output_activation``.
    """
    if len(dims) < 2:
        raise ConfigError("init_mlp needs at least input and output dims")
    if any(int(d) < 1 for d in dims):
        raise ConfigError(f"all layer dims must be positive, got {list(dims)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        act = output_activation if i == len(dims) - 2 else activation
        layers.append(glorot_dense(rng, int(a), int(b), act))
    return Mlp(layers)


def mlp_dims(in_dim: int, width: int, depth: int, out_dim: int) -> list[int]:
    """Layer sizes for a network of ``depth`` dense layers with hidden ``width``."""
    if depth < 1:
        raise ConfigError("depth must be >= 1")
    return [in_dim] + [width] * (depth - 1) + [out_dim]


# -- losses -----------------------------------------------------------------


def _check_same(pred: Tensor, target: np.ndarray) -> None:
    if pred.data.shape != target.shape:
        raise ConfigError(f"prediction {pred.data.shape} and target {target.shape} differ in shape")


def mse_loss(pred, target) -> Tensor:
    """Mean over all entries of the squared difference."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    _check_same(pred, target)
    return (pred - target).square().mean()


def bce_loss(pred, target) -> Tensor:
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    _check_same(pred, target)
    if not np.all((target == 0.0) | (target == 1.0)):
        raise ConfigError("binary cross-entropy targets must be 0 or 1")
    p = pred.clip(BCE_EPS, 1.0 - BCE_EPS)
    return -(p.log() * target + (1.0 - p).log() * (1.0 - target)).mean()


# -- optimisation -----------------------------------------------------------


@dataclass
class Adam:
    """Adam with a stepwise exponential learning-rate decay.

    The rate used for the update at counter value ``step`` is
    ``lr * decay ** (step // decay_every)``.
    """

    lr: float = 1e-3
    decay: float = 0.95
    decay_every: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def effective_lr(self, step: int | None = None) -> float:
        step = self.step_count if step is None else step
        return self.lr * self.decay ** (step // self.decay_every)

    def step(self, params: ParamSet, grads: dict[str, np.ndarray]) -> None:
        lr = self.effective_lr()
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], state: Adam) -> Adam:
    state.step(params, grads)
    return state


# -- finite differences -----------------------------------------------------


def finite_difference_check(
    loss_fn: Callable[[], Tensor], params: ParamSet, h: float = 1e-5
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Relative error per entry is ``|a - n| / max(|a| + |n|, 1e-8)``; every
    entry of every parameter is perturbed.
    """
    analytic = gradients(loss_fn(), params)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            num = (up - down) / (2 * h)
            a = analytic[name].reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a) + abs(num), 1e-8))
    return worst


def params_to_lists(params: ParamSet) -> dict[str, list]:
    return {k: v.data.tolist() for k, v in params.items()}


def load_param_lists(params: ParamSet, stored: dict[str, list]) -> None:
    missing = set(params) - set(stored)
    if missing:
        raise ConfigError(f"stored parameters missing {sorted(missing)[:3]}")
    for k, p in params.items():
        arr = np.asarray(stored[k], dtype=np.float64)
        if arr.shape != p.data.shape:
            raise ConfigError(f"parameter {k} has shape {arr.shape}, expected {p.data.shape}")
        p.data = arr


def mlp_to_dict(mlp: Mlp) -> dict:
    return {
        "dims": mlp.dims,
        "activations": [layer.activation for layer in mlp.layers],
    }


def mlp_from_dict(spec: dict) -> Mlp:
    dims, acts = spec["dims"], spec["activations"]
    layers = [
        DenseLayer(Tensor(np.zeros((a, b))), Tensor(np.zeros(b)), act)
        for a, b, act in zip(dims[:-1], dims[1:], acts)
    ]
    return Mlp(layers)
