"""Reverse-mode automatic differentiation over numpy arrays.

The graph is built eagerly (define-by-run): every operation returns a new
:class:`Node` holding its value and a closure mapping the upstream gradient
to gradients of its parents. :func:`backward` walks the graph once in
reverse topological order and then marks it spent, so a graph has to be
re-recorded before it can be differentiated again.

Nodes that do not depend on any named leaf are treated as constants and
keep no references to their parents, which keeps evaluation-only graphs
cheap.
"""
from __future__ import annotations

import math
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation, NumericError

ACTIVATIONS = ("relu", "tanh", "identity")


class Node:
    __slots__ = ("value", "parents", "vjp", "name", "grad", "requires_grad", "spent")

    def __init__(self, value, parents: tuple = (), vjp: Callable | None = None,
                 name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.name = name
        self.grad = None
        self.spent = False
        self.requires_grad = name is not None or any(p.requires_grad for p in parents)
        if self.requires_grad and parents:
            self.parents = parents
            self.vjp = vjp
        else:
            self.parents = ()
            self.vjp = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Node(shape={self.value.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary ops (numpy broadcasting)


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.value.shape, b.value.shape
    return Node(a.value + b.value, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.value.shape, b.value.shape
    return Node(a.value - b.value, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    return Node(av * bv, (a, b),
                lambda g: (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                           _unbroadcast(g * av, bv.shape) if b.requires_grad else None))


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    out = av / bv
    return Node(out, (a, b),
                lambda g: (_unbroadcast(g / bv, av.shape),
                           _unbroadcast(-g * out / bv, bv.shape)))


def matmul(a, b) -> Node:
    """Matrix product of a ``(n, k)`` or ``(k,)`` input with a ``(k, m)`` matrix."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if bv.ndim != 2 or av.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise ContractViolation(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    def vjp(g):
        ga = g @ bv.T if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        return ga, (np.outer(av, g) if av.ndim == 1 else av.T @ g)

    return Node(av @ bv, (a, b), vjp)


def linear(x, W, b) -> Node:
    """Fused ``x @ W + b`` for a ``(n, k)`` or ``(k,)`` input."""
    x, W, b = as_node(x), as_node(W), as_node(b)
    xv, Wv = x.value, W.value
    if Wv.ndim != 2 or xv.ndim not in (1, 2) or xv.shape[-1] != Wv.shape[0] or b.value.shape != Wv.shape[1:]:
        raise ContractViolation(f"linear shape mismatch: {xv.shape} @ {Wv.shape} + {b.value.shape}")

    def vjp(g):
        gx = g @ Wv.T if x.requires_grad else None
        if xv.ndim == 1:
            return gx, np.outer(xv, g), g
        return gx, xv.T @ g, g.sum(axis=0)

    return Node(xv @ Wv + b.value, (x, W, b), vjp)


# ---------------------------------------------------------------------------
# elementwise unary ops


def neg(a) -> Node:
    a = as_node(a)
    return Node(-a.value, (a,), lambda g: (-g,))


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return Node(out, (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = as_node(a)
    av = a.value
    return Node(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a) -> Node:
    a = as_node(a)
    out = np.sqrt(a.value)
    return Node(out, (a,), lambda g: (0.5 * g / out,))


def square(a) -> Node:
    a = as_node(a)
    av = a.value
    return Node(av * av, (a,), lambda g: (2.0 * g * av,))


def absolute(a) -> Node:
    a = as_node(a)
    av = a.value
    return Node(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return Node(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0
    return Node(a.value * mask, (a,), lambda g: (g * mask,))


def clip(a, lo: float, hi: float) -> Node:
    """Clamp to ``[lo, hi]``; the gradient is zero where the clamp is active."""
    a = as_node(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return Node(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and structural ops


def sum(a, axis: int | None = None) -> Node:  # noqa: A001
    a = as_node(a)
    shape = a.value.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Node(a.value.sum(axis=axis), (a,), vjp)


def mean(a, axis: int | None = None) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def logsumexp(a, axis: int = -1) -> Node:
    """Stabilized ``log(sum(exp(a)))`` along one axis."""
    a = as_node(a)
    av = a.value
    peak = av.max(axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    shifted = np.exp(av - peak)
    total = shifted.sum(axis=axis, keepdims=True)
    out = np.log(total) + peak
    weights = shifted / total
    return Node(np.squeeze(out, axis=axis), (a,),
                lambda g: (np.expand_dims(g, axis) * weights,))


def stack(nodes: Sequence, axis: int = -1) -> Node:
    nodes = tuple(as_node(n) for n in nodes)
    out = np.stack([n.value for n in nodes], axis=axis)
    k = len(nodes)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(k))

    return Node(out, nodes, vjp)


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = tuple(as_node(n) for n in nodes)
    out = np.concatenate([n.value for n in nodes], axis=axis)
    bounds = np.cumsum([n.value.shape[axis] for n in nodes])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Node(out, nodes, vjp)


def reshape(a, shape: tuple) -> Node:
    a = as_node(a)
    old = a.value.shape
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, idx) -> Node:
    a = as_node(a)
    shape = a.value.shape

    def vjp(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return Node(a.value[idx], (a,), vjp)


# ---------------------------------------------------------------------------
# backward pass


def _topological_order(output: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack_: list[tuple[Node, bool]] = [(output, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(output: Node) -> dict[str, np.ndarray]:
    """Differentiate a scalar node; return gradients keyed by leaf name.

    Only named leaves (parameters) that the output depends on appear in the
    result. Each of them also gets its ``grad`` attribute set.
    """
    if not isinstance(output, Node):
        raise ContractViolation("backward() expects a Node")
    if output.value.size != 1:
        raise ContractViolation(f"backward() needs a scalar output, got shape {output.value.shape}")
    if output.spent:
        raise ContractViolation("graph already differentiated; record it again before calling backward()")
    order = _topological_order(output)
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
    result: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        node.spent = True
        if g is None:
            continue
        if node.vjp is None:
            if node.name is not None:
                node.grad = g
                result[node.name] = g
            continue
        for parent, gp in zip(node.parents, node.vjp(g)):
            if gp is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp
    return result


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParameterSet:
    """Ordered, named float64 arrays with shapes fixed at insertion."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        for name, arr in (arrays or {}).items():
            self.add(name, arr)

    def add(self, name: str, array) -> None:
        if name in self._arrays:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        self._arrays[name] = np.array(array, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, array) -> None:
        arr = np.asarray(array, dtype=np.float64)
        if name not in self._arrays:
            raise KeyError(name)
        if arr.shape != self._arrays[name].shape:
            raise ContractViolation(
                f"parameter {name!r} has fixed shape {self._arrays[name].shape}, got {arr.shape}")
        self._arrays[name] = arr.copy()

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def names(self) -> list[str]:
        return list(self._arrays)

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self._arrays.items()]

    def size(self) -> int:
        return int(np.sum([v.size for v in self._arrays.values()]))

    def copy(self) -> ParameterSet:
        return ParameterSet({k: v.copy() for k, v in self._arrays.items()})

    def subset(self, prefix: str, rename: str | None = None) -> ParameterSet:
        """Parameters whose name starts with ``prefix``, optionally re-prefixed."""
        out = ParameterSet()
        for k, v in self._arrays.items():
            if k.startswith(prefix):
                out.add(k if rename is None else rename + k[len(prefix):], v)
        return out

    def leaves(self) -> dict[str, Node]:
        """Fresh differentiable leaves for one recorded graph."""
        return {k: Node(v, name=k) for k, v in self._arrays.items()}

    def constants(self) -> dict[str, np.ndarray]:
        return dict(self._arrays)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self._arrays.items()}

    def to_bytes(self) -> bytes:
        return b"".join(v.astype("<f8").tobytes() for v in self._arrays.values())

    @classmethod
    def from_bytes(cls, layout: Sequence[tuple[str, Sequence[int]]], buf: bytes) -> ParameterSet:
        out, pos = cls(), 0
        for name, shape in layout:
            n = math.prod(shape)
            chunk = buf[pos:pos + 8 * n]
            if len(chunk) != 8 * n:
                raise ContractViolation(f"buffer too short for parameter {name!r}")
            out.add(name, np.frombuffer(chunk, dtype="<f8").reshape(tuple(shape)))
            pos += 8 * n
        if pos != len(buf):
            raise ContractViolation(f"{len(buf) - pos} trailing bytes after parameters")
        return out

    def allclose(self, other: ParameterSet, atol: float = 0.0) -> bool:
        return self.layout() == other.layout() and all(
            np.allclose(v, other[k], rtol=0.0, atol=atol) for k, v in self.items())


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParameterSet, **hyper) -> AdamState:
        return cls(m=params.zeros_like(), v=params.zeros_like(), **hyper)


def adam_step(params: ParameterSet, grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[ParameterSet, AdamState]:
    """One bias-corrected Adam update, applied in place; returns both objects."""
    if set(grads) != set(params):
        missing = sorted(set(params) - set(grads))
        extra = sorted(set(grads) - set(params))
        raise ContractViolation(f"gradient keys do not match parameters (missing={missing}, extra={extra})")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# MLPs


def init_mlp(widths: Sequence[int], rng: np.random.Generator, prefix: str = "",
             gain: float = 1.0) -> ParameterSet:
    """Uniform weights with bound ``gain / sqrt(fan_in)`` and zero biases."""
    params = ParameterSet()
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = gain / math.sqrt(fan_in)
        params.add(f"{prefix}W{i}", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.add(f"{prefix}b{i}", np.zeros(fan_out))
    return params


def forward_mlp(params: Mapping[str, Node | np.ndarray], x, widths: Sequence[int],
                activation: str = "relu", prefix: str = "") -> Node:
    """Run an MLP with the given hidden activation and an identity output layer.

    Layer ``i`` reads ``{prefix}W{i}`` with shape ``(widths[i], widths[i+1])`` and
    ``{prefix}b{i}``. ``x`` is a single vector or a ``(batch, widths[0])`` matrix.
    """
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")
    if len(widths) < 2:
        raise ConfigError("an MLP needs at least an input and an output width")
    h = as_node(x)
    if h.value.shape[-1:] != (widths[0],):
        raise ConfigError(f"layer 0: input has shape {h.value.shape}, expected last dim {widths[0]}")
    n_layers = len(widths) - 1
    for i in range(n_layers):
        W, b = params[f"{prefix}W{i}"], params[f"{prefix}b{i}"]
        expected = (widths[i], widths[i + 1])
        if value_of(W).shape != expected or value_of(b).shape != (widths[i + 1],):
            raise ConfigError(f"layer {i} ({prefix}W{i}): weight shape {value_of(W).shape}, "
                              f"bias shape {value_of(b).shape}, expected {expected}")
        h = linear(h, W, b)
        if i < n_layers - 1:
            if activation == "relu":
                h = relu(h)
            elif activation == "tanh":
                h = tanh(h)
    return h


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(loss_fn: Callable[[Mapping[str, Node]], Node], params: ParameterSet,
                      eps: float = 1e-5) -> float:
    """Worst elementwise relative error between backward() and central differences.

    ``loss_fn`` receives a name -> Node mapping and must be deterministic.
    The relative error uses the denominator ``max(|a|, |b|, 1e-8)``.
    """
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    out = loss_fn(params.leaves())
    if not np.isfinite(out.value).all():
        raise NumericError("loss is not finite")
    analytic = backward(out)
    work = params.copy()
    worst = 0.0
    for name in params:
        base = params[name]
        a_grad = analytic.get(name, np.zeros_like(base))
        flat = work[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = float(loss_fn(work.leaves()).value)
            flat[j] = orig - eps
            down = float(loss_fn(work.leaves()).value)
            flat[j] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"loss became non-finite while perturbing {name}[{j}]")
            numeric = (up - down) / (2.0 * eps)
            a = float(a_grad.reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
