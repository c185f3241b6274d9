"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records a closure that pushes the upstream gradient into its
parents.  ``Tensor.backward`` walks the recorded graph in reverse
topological order, so a tensor consumed twice accumulates both
contributions.  Ops on tensors that do not require gradients record
nothing.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

LAYER_NORM_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericGuardError(ValueError):
    """An op was asked to evaluate outside its numeric domain."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _sym_sum(x: np.ndarray, axis: int, keepdims: bool = True) -> np.ndarray:
    # Sorted summation: the result depends only on the multiset of values,
    # which keeps softmax exactly equivariant to permutations along ``axis``.
    return np.sort(x, axis=axis).sum(axis=axis, keepdims=keepdims)


class Tensor:
    """An n-dimensional float64 array that can carry a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    # ------------------------------------------------------------------
    # bookkeeping

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
              backward: Callable[[np.ndarray], None]) -> Tensor:
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ------------------------------------------------------------------
    # arithmetic

    def __add__(self, other) -> Tensor:
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data, (self, other), "add",
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)))

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data - other.data, (self, other), "sub",
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)))

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other) - self

    def __neg__(self) -> Tensor:
        return Tensor._make(-self.data, (self,), "neg", lambda g: (-g,))

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a * b, (self, other), "mul",
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data
        out = a / b
        return Tensor._make(
            out, (self, other), "div",
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)))

    def __rtruediv__(self, other) -> Tensor:
        return as_tensor(other) / self

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, idx) -> Tensor:
        shape = self.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(self.data[idx], (self,), "getitem", backward)

    # ------------------------------------------------------------------
    # reductions and shape ops

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum", backward)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), "reshape",
                            lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), "transpose",
                            lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int) -> Tensor:
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    @property
    def T(self) -> Tensor:
        return self.swapaxes(-1, -2)

    # elementwise conveniences
    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


# ----------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    x, y = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(ga, x.shape), _unbroadcast(gb, y.shape)

    return Tensor._make(x @ y, (a, b), "matmul", backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=ax),
                        tensors, "concat", backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % (tensors[0].ndim + 1)
    return concat([t.reshape(t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors], axis=ax)


# ----------------------------------------------------------------------
# elementwise nonlinearities


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), "exp", lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    d = x.data
    return Tensor._make(np.log(d), (x,), "log", lambda g: (g / d,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._make(out, (x,), "sqrt", lambda g: (g * 0.5 / out,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._make(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._make(out, (x,), "tanh", lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    d = x.data
    return Tensor._make(np.maximum(d, 0.0), (x,), "relu", lambda g: (g * (d > 0),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) gaussian error linear unit."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * d * d)
    return Tensor._make(d * cdf, (x,), "gelu", lambda g: (g * (cdf + d * pdf),))


# ----------------------------------------------------------------------
# normalizations


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; slices along ``axis`` sum to one."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / _sym_sum(e, axis)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), "softmax", backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(_sym_sum(np.exp(z), axis))
    out = z - lse
    sm = np.exp(out)
    return Tensor._make(out, (x,), "log_softmax",
                        lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize over the last axis to zero mean, unit variance, then apply gain/bias."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm: empty feature dimension")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    gdat = gain.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gxhat = g * gdat
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._make(xhat * gdat + bias.data, (x, gain, bias), "layer_norm", backward)


def l2_norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at the origin is taken as zero."""
    d = x.data
    n = np.sqrt((d * d).sum(axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    unit = np.where(n > 0, d / safe, 0.0)
    out = n if keepdims else np.squeeze(n, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * unit,)

    return Tensor._make(out, (x,), "l2_norm", backward)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Cosine of the angle between ``a`` and ``b`` along ``axis`` (broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    na = l2_norm(a, axis=axis, keepdims=True)
    nb = l2_norm(b, axis=axis, keepdims=True)
    if np.any(na.data == 0) or np.any(nb.data == 0):
        raise NumericGuardError("cosine_similarity: zero-norm vector")
    return ((a / na) * (b / nb)).sum(axis=axis)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` [B, K]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    lp = log_softmax(logits, axis=-1)
    return -lp[np.arange(len(labels)), labels].mean()


# ----------------------------------------------------------------------
# GRU


@dataclass
class GRUParams:
    """Gate weights for a shared, row-wise GRU cell.

    ``w_*`` act on the input, ``u_*`` on the previous state.  The reset gate
    is applied to the state projection before the candidate nonlinearity.
    """

    w_z: Tensor
    w_r: Tensor
    w_n: Tensor
    u_z: Tensor
    u_r: Tensor
    u_n: Tensor
    b_z: Tensor
    b_r: Tensor
    b_n: Tensor

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, scale: float | None = None) -> GRUParams:
        s = 1.0 / np.sqrt(dim) if scale is None else scale
        mats = {k: parameter(rng.uniform(-s, s, (dim, dim)), name=k)
                for k in ("w_z", "w_r", "w_n", "u_z", "u_r", "u_n")}
        vecs = {k: parameter(np.zeros(dim), name=k) for k in ("b_z", "b_r", "b_n")}
        return cls(**mats, **vecs)

    @classmethod
    def zeros(cls, dim: int) -> GRUParams:
        mats = {k: parameter(np.zeros((dim, dim)), name=k)
                for k in ("w_z", "w_r", "w_n", "u_z", "u_r", "u_n")}
        vecs = {k: parameter(np.zeros(dim), name=k) for k in ("b_z", "b_r", "b_n")}
        return cls(**mats, **vecs)

    def named(self) -> dict[str, Tensor]:
        return dict(vars(self))


def gru_cell(x: Tensor, h: Tensor, p: GRUParams) -> Tensor:
    """h' = (1 - z) * n + z * h, applied to every row with shared weights."""
    if x.shape != h.shape:
        raise DimensionError(f"gru_cell: input {x.shape} vs state {h.shape}")
    d = x.shape[-1]
    for name, t in p.named().items():
        want = (d,) if name.startswith("b_") else (d, d)
        if t.shape != want:
            raise DimensionError(f"gru_cell: {name} has shape {t.shape}, expected {want}")
    z = sigmoid(x @ p.w_z + h @ p.u_z + p.b_z)
    r = sigmoid(x @ p.w_r + h @ p.u_r + p.b_r)
    n = tanh(x @ p.w_n + r * (h @ p.u_n) + p.b_n)
    return (1.0 - z) * n + z * h


# ----------------------------------------------------------------------
# finite-difference gradient check


@dataclass
class GradCheckReport:
    max_rel_err: list[float]
    names: list[str]
    tol: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = all(e < self.tol for e in self.max_rel_err)

    @property
    def worst(self) -> float:
        return max(self.max_rel_err, default=0.0)

    def lines(self) -> list[str]:
        return [f"{n}: max rel err {e:.3e} ({'ok' if e < self.tol else 'FAIL'})"
                for n, e in zip(self.names, self.max_rel_err)]


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
               tol: float = 1e-5, atol: float = 1e-4,
               names: Iterable[str] | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f(*inputs)`` with central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, atol)``, so
    entries smaller than ``atol`` are effectively compared in absolute terms.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError(f"grad_check: f must return a scalar, got shape {out.shape}")
    out.backward()
    errs = []
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = f(*inputs).item()
                flat[i] = orig - step
                fm = f(*inputs).item()
                flat[i] = orig
                numeric.reshape(-1)[i] = (fp - fm) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
        errs.append(float(np.max(np.abs(analytic - numeric) / denom)) if t.size else 0.0)
    if names is None:
        names = [t.name or f"input{i}" for i, t in enumerate(inputs)]
    return GradCheckReport(errs, list(names), tol)
