"""Small reverse-mode autodiff for tanh MLPs, plus Adam and categorical helpers.

Parameters of a network live in one flat float64 vector. ``layer_shapes``
describes how that vector is cut into per-layer weight matrices and bias
vectors (weights first, stored ``(in, out)``, then bias).

Losses are written against :class:`Tensor` values. Every operation records a
closure that pushes the upstream gradient to its parents; :func:`grad` runs the
closures in reverse topological order. The MLP itself is a single fused node so
that a training step costs a handful of numpy calls rather than one node per
layer operation.
"""

from __future__ import annotations

import functools

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgumentError, NumericError

__all__ = [
    "MlpSpec",
    "layer_shapes",
    "param_count",
    "flatten",
    "unflatten",
    "init_params",
    "mlp_forward",
    "mlp_cached",
    "mlp_backward",
    "Tensor",
    "grad",
    "AdamState",
    "adam_init",
    "adam_step",
    "clip_grad_norm",
    "softmax",
    "log_softmax",
    "categorical_sample",
]


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden_dims: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    zero_final_layer: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise InvalidArgumentError(f"all MLP dimensions must be >= 1, got {dims}")
        if self.activation != "tanh":
            raise InvalidArgumentError(f"unsupported activation {self.activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)


@functools.lru_cache(maxsize=None)
def _shapes(dims: tuple[int, ...]) -> tuple:
    return tuple(((dims[i], dims[i + 1]), (dims[i + 1],)) for i in range(len(dims) - 1))


def layer_shapes(spec: MlpSpec) -> list[tuple[tuple[int, int], tuple[int]]]:
    return list(_shapes(spec.dims))


def param_count(spec: MlpSpec) -> int:
    return sum(w[0] * w[1] + b[0] for w, b in layer_shapes(spec))


def unflatten(spec: MlpSpec, flat: np.ndarray, offset: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views into ``flat`` for every (W, b) pair. No copies are made."""
    layers = []
    pos = offset
    for (n_in, n_out), _ in _shapes(spec.dims):
        w = flat[pos:pos + n_in * n_out].reshape(n_in, n_out)
        pos += n_in * n_out
        b = flat[pos:pos + n_out]
        pos += n_out
        layers.append((w, b))
    return layers


def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    parts = []
    for w, b in layers:
        parts.append(np.asarray(w, dtype=np.float64).ravel())
        parts.append(np.asarray(b, dtype=np.float64).ravel())
    return np.concatenate(parts)


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


def init_params(
    spec: MlpSpec,
    rng: np.random.Generator,
    final_gain: float = 0.01,
    hidden_gain: float = float(np.sqrt(2.0)),
) -> np.ndarray:
    """Orthogonal init with zero biases.

    Hidden layers use ``hidden_gain``; the output layer uses ``final_gain``
    (0.01 for actors, 1.0 for critics) unless ``spec.zero_final_layer`` is set,
    in which case it is exactly zero.
    """
    layers = []
    shapes = layer_shapes(spec)
    for i, ((n_in, n_out), _) in enumerate(shapes):
        last = i == len(shapes) - 1
        if last and spec.zero_final_layer:
            w = np.zeros((n_in, n_out))
        else:
            w = _orthogonal(rng, n_in, n_out, final_gain if last else hidden_gain)
        layers.append((w, np.zeros(n_out)))
    return flatten(layers)


def mlp_forward(spec: MlpSpec, params: np.ndarray, x, offset: int = 0) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (spec.input_dim,) or x.ndim > 2:
        raise InvalidArgumentError(f"expected input of width {spec.input_dim}, got shape {x.shape}")
    h = x
    layers = unflatten(spec, params, offset)
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < last:
            h = np.tanh(h)
    return h


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Tensor:
    """A value in a differentiable computation.

    Leaves created with ``requires_grad=True`` accumulate into ``.grad``.
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents: tuple = (), backward_fn=None, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.value.shape)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.value.shape))

    return Tensor(a.value + b.value, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.value, b.value.shape))

    return Tensor(a.value * b.value, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.value, (a,), lambda g: a._accum(-g))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return Tensor(out, (a,), lambda g: a._accum(g * out))


def log(a: Tensor) -> Tensor:
    return Tensor(np.log(a.value), (a,), lambda g: a._accum(g / a.value))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return Tensor(out, (a,), lambda g: a._accum(g * (1.0 - out * out)))


def square(a: Tensor) -> Tensor:
    return Tensor(a.value * a.value, (a,), lambda g: a._accum(2.0 * g * a.value))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.value >= lo) & (a.value <= hi)
    return Tensor(np.clip(a.value, lo, hi), (a,), lambda g: a._accum(g * inside))


def minimum(a, b) -> Tensor:
    """Elementwise min. Ties send the gradient to ``a``."""
    a, b = _wrap(a), _wrap(b)
    pick_a = a.value <= b.value

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.where(pick_a, g, 0.0), a.value.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.where(pick_a, 0.0, g), b.value.shape))

    return Tensor(np.minimum(a.value, b.value), (a, b), backward)


def total(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return Tensor(a.value.sum(), (a,), lambda g: a._accum(np.broadcast_to(g, a.value.shape)))

    def backward(g):
        a._accum(np.broadcast_to(np.expand_dims(g, axis), a.value.shape))

    return Tensor(a.value.sum(axis=axis), (a,), backward)


def mean(a: Tensor, weights: np.ndarray | None = None) -> Tensor:
    """Mean over all entries of a 1-D tensor, optionally weighted.

    Weighted form is ``sum(w * a) / sum(w)``; integer counts make it equal to
    the plain mean over the expanded rows.
    """
    if weights is None:
        n = a.value.size
        return Tensor(a.value.mean(), (a,), lambda g: a._accum(np.full(a.value.shape, g / n)))
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    return Tensor(float(w @ a.value), (a,), lambda g: a._accum(g * w))


def log_softmax_t(a: Tensor) -> Tensor:
    z = a.value - a.value.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)

    def backward(g):
        a._accum(g - p * g.sum(axis=-1, keepdims=True))

    return Tensor(out, (a,), backward)


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Row-wise gather ``a[i, index[i]]`` from a 2-D tensor."""
    idx = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.value.shape[0])

    def backward(g):
        full = np.zeros_like(a.value)
        full[rows, idx] = g
        a._accum(full)

    return Tensor(a.value[rows, idx], (a,), backward)


def mlp_cached(spec: MlpSpec, flat: np.ndarray, x, offset: int = 0):
    """Forward pass on a 2-D batch that keeps what :func:`mlp_backward` needs.

    Returns ``(output, layers, activations)``. Raises :class:`NumericError`
    naming the first layer with a non-finite output.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise InvalidArgumentError(f"expected a batch of width {spec.input_dim}, got shape {x.shape}")
    layers = unflatten(spec, flat, offset)
    acts = [x]
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < last:
            h = np.tanh(h)
        if not np.isfinite(h).all():
            raise NumericError(f"non-finite output in MLP layer {i}", layer=i)
        acts.append(h)
    return h, layers, acts


def mlp_backward(spec: MlpSpec, layers, acts, g: np.ndarray, out: np.ndarray, offset: int = 0) -> np.ndarray:
    """Add the parameter gradient of ``sum(g * output)`` into the flat vector ``out``."""
    gl = unflatten(spec, out, offset)
    for i in range(len(layers) - 1, -1, -1):
        gw, gb = gl[i]
        gw += acts[i].T @ g
        gb += g.sum(axis=0)
        if i > 0:
            g = (g @ layers[i][0].T) * (1.0 - acts[i] * acts[i])
    return out


def mlp(spec: MlpSpec, params: Tensor, x, offset: int = 0) -> Tensor:
    """Fused MLP node: differentiable in ``params``, constant in ``x``."""
    h, layers, acts = mlp_cached(spec, params.value, x, offset)

    def backward(g):
        params._accum(mlp_backward(spec, layers, acts, g, np.zeros_like(params.value), offset))

    return Tensor(h, (params,), backward)


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss_fn: Callable[[Tensor], Tensor], params: np.ndarray) -> tuple[float, np.ndarray]:
    """Value and gradient of a scalar loss with respect to a flat parameter vector."""
    leaf = Tensor(np.array(params, dtype=np.float64, copy=True), requires_grad=True)
    out = loss_fn(leaf)
    if not isinstance(out, Tensor):
        out = Tensor(out)
    if out.value.size != 1:
        raise InvalidArgumentError("loss must be a scalar")
    value = float(out.value)
    if not np.isfinite(value):
        raise NumericError("loss is not finite")
    if not out.requires_grad:
        return value, np.zeros_like(leaf.value)
    out.grad = np.ones_like(out.value)
    for node in reversed(_topo(out)):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
    g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    if not np.isfinite(g).all():
        raise NumericError("gradient is not finite")
    return value, g


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(n: int, **kwargs) -> AdamState:
    return AdamState(np.zeros(n), np.zeros(n), 0, **kwargs)


def adam_step(params: np.ndarray, state: AdamState, gradient: np.ndarray, lr: float) -> tuple[np.ndarray, AdamState]:
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != params.shape:
        raise InvalidArgumentError(f"gradient shape {gradient.shape} != params shape {params.shape}")
    if np.isnan(gradient).any():
        raise NumericError("NaN in gradient")
    b1, b2 = state.beta1, state.beta2
    t = state.step_count + 1
    m = state.first_moment * b1
    m += (1.0 - b1) * gradient
    v = gradient * gradient
    v *= 1.0 - b2
    v += b2 * state.second_moment
    denom = v * (1.0 / (1.0 - b2 ** t))
    np.sqrt(denom, out=denom)
    denom += state.eps
    step = m * (lr / (1.0 - b1 ** t))
    step /= denom
    new = params - step
    return new, AdamState(m, v, t, b1, b2, state.eps)


def clip_grad_norm(g: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.sqrt(g @ g))
    if norm > max_norm:
        return g * (max_norm / (norm + 1e-12))
    return g


# ---------------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------------


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def categorical_sample(probs, rng: np.random.Generator) -> int:
    c = np.cumsum(probs)
    i = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    return min(i, len(c) - 1)
