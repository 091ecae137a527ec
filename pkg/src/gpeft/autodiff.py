"""Small reverse-mode autodiff engine on top of numpy.

Every primitive is a ``Function`` subclass with a ``forward`` over raw arrays
and a ``backward`` that maps the output adjoint to input adjoints.  Applying a
function to tensors that require grad records a ``Node``; nodes carry a global
sequence number so that a backward pass can visit them in exact reverse order
of recording.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = {"dtype": np.float32, "grad": True}
_counter = itertools.count()


def get_dtype():
    return _state["dtype"]


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[name]


def precision_name(dtype=None) -> str:
    dtype = np.dtype(dtype or get_dtype())
    return "float64" if dtype == np.float64 else "float32"


@contextlib.contextmanager
def no_grad():
    """Disable op recording (inference)."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


@contextlib.contextmanager
def precision(name: str):
    old = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = old


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, c):
        return PowScalar.apply(self, c=float(c))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def sqrt(self):
        return Sqrt.apply(self)

    def relu(self):
        return ReLU.apply(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


@dataclass(eq=False)
class Node:
    fn: type
    inputs: tuple
    kwargs: dict
    ctx: dict
    out: Tensor
    seq: int = field(default_factory=lambda: next(_counter))


class Function:
    """Base class for primitives. Subclasses implement ``forward`` and ``backward``."""

    @staticmethod
    def forward(ctx: dict, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: dict, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        dtype = next((x.data.dtype for x in inputs if isinstance(x, Tensor)), None)
        tensors = tuple(x if isinstance(x, Tensor) else Tensor(x, dtype=dtype) for x in inputs)
        ctx: dict = {}
        out_data = cls.forward(ctx, *(t.data for t in tensors), **kwargs)
        out = Tensor.__new__(Tensor)
        out.data = out_data
        out.requires_grad = False
        out.grad = None
        out.name = None
        out.node = None
        if _state["grad"] and any(t.tracked for t in tensors):
            out.node = Node(cls, tensors, kwargs, ctx, out)
        return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx["shapes"] = (a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx["shapes"]
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx["shapes"] = (a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx["shapes"]
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx["a"], ctx["b"] = a, b
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["a"], ctx["b"]
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class Div(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx["a"], ctx["b"] = a, b
        return a / b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["a"], ctx["b"]
        ga = g / b
        gb = -ga * a / b
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


class Neg(Function):
    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, g):
        return (-g,)


class PowScalar(Function):
    @staticmethod
    def forward(ctx, a, c):
        ctx["a"], ctx["c"] = a, c
        return a**c

    @staticmethod
    def backward(ctx, g):
        a, c = ctx["a"], ctx["c"]
        return (g * c * a ** (c - 1),)


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
        ctx["a"], ctx["b"] = a, b
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["a"], ctx["b"]
        if b.ndim == 2 and a.ndim > 2:
            # common (batch, rows, k) @ (k, m) case: fold batch into rows
            ga = g @ b.T
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
        return ga, gb


class Sum(Function):
    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx["shape"], ctx["axis"], ctx["keepdims"] = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, g):
        shape, axis, keepdims = ctx["shape"], ctx["axis"], ctx["keepdims"]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)


class Mean(Function):
    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx["shape"], ctx["axis"], ctx["keepdims"] = a.shape, axis, keepdims
        out = np.asarray(a.mean(axis=axis, keepdims=keepdims))
        ctx["count"] = a.size // max(out.size, 1)
        return out

    @staticmethod
    def backward(ctx, g):
        shape, axis, keepdims = ctx["shape"], ctx["axis"], ctx["keepdims"]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / ctx["count"], shape).copy(),)


class Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape):
        ctx["shape"] = a.shape
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx["shape"]),)


class Transpose(Function):
    @staticmethod
    def forward(ctx, a, axes=None):
        axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
        ctx["axes"] = axes
        return np.transpose(a, axes)

    @staticmethod
    def backward(ctx, g):
        return (np.transpose(g, np.argsort(ctx["axes"])),)


class GetItem(Function):
    @staticmethod
    def forward(ctx, a, index):
        ctx["shape"], ctx["index"] = a.shape, index
        return np.array(a[index])

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx["shape"], dtype=g.dtype)
        index = ctx["index"]
        if _is_basic(index):
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, np.integer)) or p is None or p is Ellipsis for p in parts)


class BroadcastTo(Function):
    @staticmethod
    def forward(ctx, a, shape):
        ctx["shape"] = a.shape
        return np.broadcast_to(a, shape).copy()

    @staticmethod
    def backward(ctx, g):
        return (_unbroadcast(g, ctx["shape"]),)


class Take(Function):
    """Row gather ``table[ids]``; used for embedding lookup."""

    @staticmethod
    def forward(ctx, table, ids):
        ids = np.asarray(ids, dtype=np.int64)
        ctx["ids"], ctx["shape"] = ids, table.shape
        return table[ids]

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx["shape"], dtype=g.dtype)
        ids = ctx["ids"]
        np.add.at(out, ids.reshape(-1), g.reshape(-1, *ctx["shape"][1:]))
        return (out,)


class Concat(Function):
    @staticmethod
    def forward(ctx, *arrays, axis=0):
        ctx["sizes"] = [a.shape[axis] for a in arrays]
        ctx["axis"] = axis
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, g):
        splits = np.cumsum(ctx["sizes"])[:-1]
        return tuple(np.split(g, splits, axis=ctx["axis"]))


class Where(Function):
    """``where(mask, a, b)`` with a constant boolean mask."""

    @staticmethod
    def forward(ctx, a, b, mask):
        mask = np.asarray(mask, dtype=bool)
        ctx["mask"], ctx["shapes"] = mask, (a.shape, b.shape)
        return np.where(mask, a, b)

    @staticmethod
    def backward(ctx, g):
        mask = ctx["mask"]
        sa, sb = ctx["shapes"]
        zero = np.zeros((), dtype=g.dtype)
        return _unbroadcast(np.where(mask, g, zero), sa), _unbroadcast(np.where(mask, zero, g), sb)


class Exp(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.exp(a)
        ctx["out"] = out
        return out

    @staticmethod
    def backward(ctx, g):
        return (g * ctx["out"],)


class Log(Function):
    @staticmethod
    def forward(ctx, a):
        ctx["a"] = a
        return np.log(a)

    @staticmethod
    def backward(ctx, g):
        return (g / ctx["a"],)


class Sqrt(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.sqrt(a)
        ctx["out"] = out
        return out

    @staticmethod
    def backward(ctx, g):
        return (g / (2 * ctx["out"]),)


class ReLU(Function):
    @staticmethod
    def forward(ctx, a):
        ctx["pos"] = a > 0
        return np.where(ctx["pos"], a, np.zeros((), dtype=a.dtype))

    @staticmethod
    def backward(ctx, g):
        return (np.where(ctx["pos"], g, np.zeros((), dtype=g.dtype)),)


_GELU_C = math.sqrt(2.0 / math.pi)


class GELU(Function):
    """tanh approximation of GELU."""

    @staticmethod
    def forward(ctx, a):
        inner = _GELU_C * (a + 0.044715 * a**3)
        t = np.tanh(inner)
        ctx["a"], ctx["t"] = a, t
        return 0.5 * a * (1 + t)

    @staticmethod
    def backward(ctx, g):
        a, t = ctx["a"], ctx["t"]
        dinner = _GELU_C * (1 + 3 * 0.044715 * a**2)
        return (g * (0.5 * (1 + t) + 0.5 * a * (1 - t * t) * dinner),)


class Softmax(Function):
    """Softmax along the last axis. ``mask`` (broadcastable, True = keep) zeroes excluded entries."""

    @staticmethod
    def forward(ctx, a, mask=None):
        if mask is not None:
            a = np.where(mask, a, -np.inf)
        m = a.max(axis=-1, keepdims=True)
        e = np.exp(a - m)
        out = e / e.sum(axis=-1, keepdims=True)
        ctx["out"] = out
        return out

    @staticmethod
    def backward(ctx, g):
        y = ctx["out"]
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


class LayerNorm(Function):
    """Normalise the last axis, then scale by ``gain`` and shift by ``bias``."""

    @staticmethod
    def forward(ctx, x, gain, bias, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        ctx.update(xhat=xhat, rstd=rstd, gain=gain, xshape=x.shape)
        return xhat * gain + bias

    @staticmethod
    def backward(ctx, g):
        xhat, rstd, gain = ctx["xhat"], ctx["rstd"], ctx["gain"]
        n = xhat.shape[-1]
        flat_g = g.reshape(-1, n)
        flat_xhat = xhat.reshape(-1, n)
        dgain = (flat_g * flat_xhat).sum(axis=0)
        dbias = flat_g.sum(axis=0)
        gx = g * gain
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias


class SoftmaxCrossEntropy(Function):
    """Per-row ``-log softmax(logits)[target]``; rows with target < 0 give 0."""

    @staticmethod
    def forward(ctx, logits, targets):
        targets = np.asarray(targets, dtype=np.int64)
        valid = targets >= 0
        safe = np.where(valid, targets, 0)
        m = logits.max(axis=-1, keepdims=True)
        shifted = logits - m
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        logp = shifted - lse
        picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
        ctx.update(logp=logp, safe=safe, valid=valid)
        return np.where(valid, -picked, np.zeros((), dtype=logits.dtype))

    @staticmethod
    def backward(ctx, g):
        logp, safe, valid = ctx["logp"], ctx["safe"], ctx["valid"]
        p = np.exp(logp)
        np.put_along_axis(p, safe[..., None], np.take_along_axis(p, safe[..., None], axis=-1) - 1, axis=-1)
        scale = np.where(valid, g, np.zeros((), dtype=g.dtype))[..., None]
        return (p * scale,)


# functional wrappers


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def where(mask, a, b) -> Tensor:
    return Where.apply(a, b, mask=np.asarray(mask, dtype=bool))


def take(table, ids) -> Tensor:
    return Take.apply(table, ids=np.asarray(ids, dtype=np.int64))


def softmax(x, mask=None) -> Tensor:
    return Softmax.apply(x, mask=mask)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(x, gain, bias, eps=eps)


def gelu(x) -> Tensor:
    return GELU.apply(x)


def relu(x) -> Tensor:
    return ReLU.apply(x)


def softmax_cross_entropy(logits, targets) -> Tensor:
    return SoftmaxCrossEntropy.apply(logits, targets=np.asarray(targets, dtype=np.int64))


def constant(x) -> Tensor:
    return Tensor(x)


def parameter(x, name: str | None = None) -> Tensor:
    return Tensor(x, requires_grad=True, name=name)


# tape


class ComputationTape:
    """Recorded primitive ops reachable from an output, in recording order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputationTape":
        if out.node is None:
            raise TapeError("tensor was not produced by recorded operations")
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [out.node]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            for t in node.inputs:
                if t.node is not None and id(t.node) not in seen:
                    stack.append(t.node)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.fn.__name__ for n in self.nodes]

    def replay(self) -> bool:
        """Recompute every node from its recorded inputs; True iff all outputs match bit-exactly."""
        fresh: dict[int, np.ndarray] = {}
        ok = True
        for node in self.nodes:
            arrays = [fresh.get(id(t), t.data) for t in node.inputs]
            data = node.fn.forward({}, *arrays, **node.kwargs)
            if data.shape != node.out.data.shape or not np.array_equal(data, node.out.data):
                ok = False
            fresh[id(node.out)] = data
        return ok

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> list[Node]:
        adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data) if grad is None else grad}
        leaf: dict[int, tuple[Tensor, np.ndarray]] = {}
        visited = []
        for node in reversed(self.nodes):
            g = adj.pop(id(node.out), None)
            if g is None:
                continue
            visited.append(node)
            grads = node.fn.backward(node.ctx, g)
            for t, gi in zip(node.inputs, grads):
                if gi is None or not t.tracked:
                    continue
                if t.node is not None:
                    key = id(t)
                    adj[key] = gi if key not in adj else adj[key] + gi
                elif t.requires_grad:
                    key = id(t)
                    if key in leaf:
                        leaf[key] = (t, leaf[key][1] + gi)
                    else:
                        leaf[key] = (t, gi)
        # single add per leaf keeps repeated backward passes exactly linear
        for t, gi in leaf.values():
            t.grad = t.grad + gi.astype(t.data.dtype, copy=False)
        return visited


def backward(loss: Tensor) -> ComputationTape:
    """Accumulate d(loss)/d(leaf) into every reachable leaf that requires grad."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = ComputationTape.from_output(loss)
    tape.backward(loss)
    return tape


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


# gradient checking


@dataclass
class GradReport:
    errors: dict[str, float]
    elementwise: dict[str, float]
    failures: dict[str, str]
    checked: dict[str, int]

    @property
    def max_error(self) -> float:
        if self.failures:
            return math.inf
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return not self.failures and self.max_error < tol


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    num = float(np.linalg.norm(a - b))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-8)
    return num / den


def grad_check(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradReport:
    """Compare reverse-mode grads of ``fn()`` with central differences.

    The analytic pass runs at the parameters' own precision; the numeric pass
    always runs in float64.  With ``max_coords`` only a seeded random subset of
    each parameter's coordinates is perturbed.
    """
    rng = np.random.default_rng(seed)
    names = list(params)
    for p in params.values():
        p.zero_grad()
    with precision(precision_name(next(iter(params.values())).dtype) if params else "float64"):
        loss = fn()
    failures: dict[str, str] = {}
    if not np.isfinite(loss.data).all():
        return GradReport({}, {}, {n: "non-finite loss" for n in names}, {})
    if loss.node is not None:
        backward(loss)
    analytic = {n: params[n].grad.astype(np.float64) for n in names}

    originals = {n: params[n].data for n in names}
    for n in names:
        params[n].data = originals[n].astype(np.float64)

    errors, elementwise, checked = {}, {}, {}
    try:
        with precision("float64"):
            for n in names:
                p = params[n]
                base = p.data
                coords = np.arange(base.size)
                if max_coords is not None and base.size > max_coords:
                    coords = np.sort(rng.choice(base.size, size=max_coords, replace=False))
                numeric = np.empty(len(coords))
                bad = False
                for k, c in enumerate(coords):
                    flat = base.reshape(-1).copy()
                    flat[c] += eps
                    p.data = flat.reshape(base.shape)
                    up = fn().data
                    flat[c] -= 2 * eps
                    p.data = flat.reshape(base.shape)
                    down = fn().data
                    if not (np.isfinite(up) and np.isfinite(down)):
                        bad = True
                        break
                    numeric[k] = (float(up) - float(down)) / (2 * eps)
                p.data = base
                if bad:
                    failures[n] = "non-finite function value"
                    continue
                a = analytic[n].reshape(-1)[coords]
                errors[n] = relative_error(a, numeric)
                denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
                elementwise[n] = float(np.max(np.abs(a - numeric) / denom)) if len(coords) else 0.0
                checked[n] = len(coords)
    finally:
        for n in names:
            params[n].data = originals[n]
    return GradReport(errors, elementwise, failures, checked)
