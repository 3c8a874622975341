"""Reverse-mode automatic differentiation over dense numpy matrices.

Every value flowing through the network is a :class:`Tensor`: a numpy array
plus the parents it was computed from and a closure mapping the output
gradient to parent gradients. Calling :meth:`Tensor.backward` on a scalar
walks the graph once in reverse topological order and accumulates gradients
into the leaves that require them (the entries of a :class:`ParameterStore`,
or any tensor created with ``requires_grad=True``).

Non-smooth primitives (``relu``, ``max``, k-NN selection) report their
discrete branch decisions to an optional recorder so the finite-difference
checker can tell when a probe straddles a kink.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "NonFiniteError",
    "NonSmoothPoint",
    "ParameterStore",
    "Adam",
    "as_tensor",
    "concat",
    "softmax_rows",
    "context_norm",
    "layer_norm",
    "relu",
    "gelu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "log_sigmoid",
    "sqrt",
    "take_rows",
    "finite_diff_check",
    "finite_diff_report",
    "record_branch",
]

CHECK_FINITE = True
NORM_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class NonSmoothPoint(ValueError):
    """Raised when a gradient check is asked to probe exactly at a kink."""


# ---------------------------------------------------------------------------
# branch recording (used by the finite-difference checker)

_branch_log: list | None = None


def record_branch(tag: str, decision: np.ndarray, on_kink: bool = False) -> None:
    """Log a discrete decision taken by a non-smooth primitive.

    ``on_kink`` marks that an input sits exactly at a non-differentiable
    point (e.g. a ReLU input equal to 0).
    """
    if _branch_log is not None:
        _branch_log.append((tag, np.ascontiguousarray(decision).tobytes(), bool(on_kink)))


@contextlib.contextmanager
def _recording():
    global _branch_log
    saved = _branch_log
    _branch_log = []
    try:
        yield _branch_log
    finally:
        _branch_log = saved


# ---------------------------------------------------------------------------
# Tensor


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check(value: np.ndarray, op: str) -> np.ndarray:
    if CHECK_FINITE and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    return value


class Tensor:
    """A node in the computation graph holding a numpy array."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op")
    __array_priority__ = 100

    def __init__(self, value, parents: Sequence["Tensor"] = (), backward_fn=None,
                 requires_grad: bool = False, op: str = ""):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op

    @classmethod
    def from_op(cls, value, parents: Sequence["Tensor"], backward_fn, op: str) -> "Tensor":
        """Create the output of a primitive.

        ``backward_fn(grad)`` must return one gradient (or ``None``) per parent.
        Parents that carry no gradient are dropped from the graph.
        """
        value = _check(np.asarray(value), op)
        if any(p.requires_grad for p in parents):
            return cls(value, parents, backward_fn, requires_grad=True, op=op)
        return cls(value, op=op)

    # -- conveniences ------------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.value)

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other, self.dtype), self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def relu(self):
        return relu(self)

    # -- backward ------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.value.size != 1:
                raise ValueError(f"backward needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.value)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.value.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(np.asarray(pg), parent.shape)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None and arr.dtype != dtype and np.issubdtype(arr.dtype, np.number):
        arr = arr.astype(dtype)
    return Tensor(arr)


def _pair(a, b):
    a = a if isinstance(a, Tensor) else None
    if a is None:
        raise TypeError("left operand must be a Tensor")
    return a, as_tensor(b, a.dtype)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor.from_op(a.value + b.value, (a, b), lambda g: (g, g), "add")


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    return Tensor.from_op(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    out = av / bv
    return Tensor.from_op(out, (a, b), lambda g: (g / bv, -g * out / bv), "div")


def power(a: Tensor, exponent: float) -> Tensor:
    av = a.value
    return Tensor.from_op(av ** exponent, (a,),
                          lambda g: (g * exponent * av ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    av = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(av)
    return Tensor.from_op(value, (a,), lambda g: (g / av,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)
    return Tensor.from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return Tensor.from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow."""
    x = a.value
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    # d/dx log sigmoid(x) = sigmoid(-x)
    s_neg = np.exp(out - x)
    return Tensor.from_op(out, (a,), lambda g: (g * s_neg,), "log_sigmoid")


def relu(a: Tensor) -> Tensor:
    x = a.value
    mask = x > 0
    record_branch("relu", mask, on_kink=bool(np.any(x == 0)))
    # gradient at exactly 0 is taken as 0
    return Tensor.from_op(np.where(mask, x, 0.0).astype(x.dtype, copy=False), (a,),
                          lambda g: (g * mask,), "relu")


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.value
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return Tensor.from_op(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    av, bv = a.value, b.value

    def backward(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(av @ bv, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    return Tensor.from_op(a.value.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor.from_op(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(a.value.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.value.size if axis is None else a.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / n)


def tmax(a: Tensor, axis=None, keepdims=False) -> Tensor:
    """Maximum along an axis; the lowest index wins ties for the gradient route."""
    x = a.value
    if axis is None:
        idx = np.unravel_index(np.argmax(x), x.shape)
        out = x[idx]
        record_branch("max", np.asarray(np.argmax(x)))

        def backward(g):
            full = np.zeros_like(x)
            full[idx] = g
            return (full,)

        return Tensor.from_op(out, (a,), backward, "max")
    arg = np.argmax(x, axis=axis)
    record_branch("max", arg)
    out = np.take_along_axis(x, np.expand_dims(arg, axis), axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(x)
        np.put_along_axis(full, np.expand_dims(arg, axis), g, axis=axis)
        return (full,)

    return Tensor.from_op(out if keepdims else np.squeeze(out, axis), (a,), backward, "max")


def getitem(a: Tensor, key) -> Tensor:
    x = a.value

    def backward(g):
        full = np.zeros_like(x)
        np.add.at(full, key, g)
        return (full,)

    return Tensor.from_op(x[key], (a,), backward, "getitem")


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``a[index]``; ``index`` may be any integer array."""
    x = a.value
    index = np.asarray(index)

    def backward(g):
        full = np.zeros_like(x)
        np.add.at(full, index.reshape(-1), g.reshape(-1, *x.shape[1:]))
        return (full,)

    return Tensor.from_op(x[index], (a,), backward, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(np.concatenate([t.value for t in tensors], axis=axis),
                          tensors, backward, "concat")


# ---------------------------------------------------------------------------
# fused normalizations


def softmax_rows(m: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction."""
    x = m.value
    if np.isnan(x).any():
        raise NonFiniteError("softmax_rows received NaN")
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(out, (m,), backward, "softmax_rows")


def _standardize(a: Tensor, axis: int, eps: float, op: str) -> Tensor:
    x = a.value
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gym = (g * y).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return Tensor.from_op(y, (a,), backward, op)


def context_norm(f: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Standardize each channel (column) across the N correspondences."""
    if f.shape[0] < 2:
        raise ValueError(f"context_norm needs at least 2 rows, got {f.shape[0]}")
    return _standardize(f, 0, eps, "context_norm")


def layer_norm(f: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Standardize each row across its channels."""
    return _standardize(f, -1, eps, "layer_norm")


# ---------------------------------------------------------------------------
# parameters and optimization


class ParameterStore:
    """Named trainable matrices with their accumulated gradients.

    Parameters are leaf tensors; ``backward`` writes into their ``grad``.
    """

    def __init__(self, dtype=np.float64, seed: int = 0):
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, op="param")
        self.params[name] = t
        return t

    def uniform(self, name: str, shape: tuple, fan_in: int, scale: float = 1.0) -> Tensor:
        bound = scale / math.sqrt(max(fan_in, 1))
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape: tuple) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple) -> Tensor:
        return self.add(name, np.ones(shape))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        """Gradient per parameter; unreachable parameters get zeros."""
        return {name: (np.zeros_like(p.value) if p.grad is None else p.grad)
                for name, p in self.params.items()}

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.gradients().values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, value in state.items():
            p = self.params[name]
            if p.value.shape != np.shape(value):
                raise ValueError(f"shape mismatch for {name}: {p.value.shape} vs {np.shape(value)}")
            p.value = np.array(value, dtype=self.dtype)

    def save(self, path, metadata: dict | None = None) -> None:
        arrays = {f"param/{k}": v for k, v in self.state_dict().items()}
        arrays["__meta__"] = np.frombuffer(
            json.dumps(metadata or {}, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @staticmethod
    def read(path) -> tuple[dict[str, np.ndarray], dict]:
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            state = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
        return state, meta


@dataclass
class Adam:
    """Adaptive-moment optimizer over a :class:`ParameterStore`."""

    store: ParameterStore
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.store.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.value)
                self.v[name] = np.zeros_like(p.value)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class FiniteDiffReport:
    max_relative_error: float
    n_checked: int
    n_excluded: int
    worst_index: tuple | None = None


def finite_diff_report(fn: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-6,
                       coords: Iterable[tuple] | int | None = None,
                       rng: np.random.Generator | None = None) -> FiniteDiffReport:
    """Compare reverse-mode gradients of ``fn`` with central differences.

    ``coords`` selects which coordinates to probe: ``None`` for all, an int
    for that many random ones, or an explicit iterable of index tuples.
    A probe whose forward passes take a different discrete branch from the
    base point (ReLU sign, argmax, neighbor set) straddles a kink; it is
    retried with a smaller step and excluded if it still straddles.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.array(point, dtype=np.float64)

    with _recording() as log0:
        x = Tensor(point.copy(), requires_grad=True)
        out = fn(x)
    if out.value.size != 1:
        raise ValueError("finite_diff_check needs a scalar-valued function")
    if any(on_kink for _, _, on_kink in log0):
        raise NonSmoothPoint("base point lies exactly on a non-smooth point")
    base_branches = [(tag, key) for tag, key, _ in log0]
    out.backward()
    analytic = np.zeros_like(point) if x.grad is None else x.grad

    if coords is None:
        indices = list(np.ndindex(point.shape))
    elif isinstance(coords, int):
        rng = rng or np.random.default_rng(0)
        flat = rng.choice(point.size, size=min(coords, point.size), replace=False)
        indices = [np.unravel_index(i, point.shape) for i in np.sort(flat)]
    else:
        indices = [tuple(c) for c in coords]

    def probe(idx, h):
        vals = []
        for sign in (1.0, -1.0):
            xp = point.copy()
            xp[idx] += sign * h
            with _recording() as log:
                vals.append(float(fn(Tensor(xp)).value))
            if [(tag, key) for tag, key, _ in log] != base_branches:
                return None
        return (vals[0] - vals[1]) / (2.0 * h)

    worst, worst_idx, excluded = 0.0, None, 0
    for idx in indices:
        numeric = None
        for h in (step, step / 10.0, step / 100.0):
            numeric = probe(idx, h)
            if numeric is not None:
                break
        if numeric is None:
            excluded += 1
            continue
        a = float(analytic[idx])
        err = abs(a - numeric) / max(1.0, abs(a))
        if err > worst:
            worst, worst_idx = err, idx
    return FiniteDiffReport(worst, len(indices) - excluded, excluded, worst_idx)


def finite_diff_check(fn: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-6,
                      coords=None, rng=None) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    return finite_diff_report(fn, point, step, coords, rng).max_relative_error
