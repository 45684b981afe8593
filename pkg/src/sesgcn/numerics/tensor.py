"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op returns a new :class:`DiffTensor`. When gradients are enabled and any
input requires a gradient, the output keeps references to its inputs plus a
closure mapping the output gradient to input gradients. :func:`backward`
collects the reachable nodes into a :class:`Tape` ordered by creation id and
replays the closures in reverse.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractViolation, EmptyGradientError, NumericFault

_ids = itertools.count()
_mode = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


class DiffTensor:
    __slots__ = (
        "data",
        "grad",
        "requires_grad",
        "name",
        "node_id",
        "op",
        "trainable_mask",
        "_parents",
        "_backward",
    )
    __array_priority__ = 100.0

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        data = np.array(values, dtype=np.float64)
        if not np.isfinite(data).all():
            raise NumericFault("create", f"tensor {name or '<unnamed>'} holds NaN/Inf")
        self._init(data, requires_grad, name)

    def _init(self, data: np.ndarray, requires_grad: bool, name: str | None) -> None:
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_ids)
        self.op = "leaf"
        # Boolean array; entries set to False are constants the optimizer must skip.
        self.trainable_mask: np.ndarray | None = None
        self._parents: tuple[DiffTensor, ...] = ()
        self._backward: BackwardFn | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False) -> "DiffTensor":
        out = cls.__new__(cls)
        out._init(data, requires_grad, None)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.shape}, op={self.op}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(x)


def record(data: np.ndarray, parents: Sequence[DiffTensor], backward_fn: BackwardFn, op: str) -> DiffTensor:
    """Wrap an op result, check it is finite and put it on the tape if needed."""
    # A single reduction is NaN/Inf iff some entry is (or the sum overflows).
    if not np.isfinite(np.sum(data)):
        raise NumericFault(op)
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = DiffTensor._wrap(data, track)
    out.op = op
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


@dataclass(frozen=True)
class TapeEntry:
    node_id: int
    op: str
    input_ids: tuple[int, ...]


class Tape:
    """Nodes reachable from a root, in creation (hence topological) order."""

    def __init__(self, root: DiffTensor):
        seen: dict[int, DiffTensor] = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if node.node_id in seen:
                continue
            seen[node.node_id] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        self.nodes = [seen[k] for k in sorted(seen)]

    @property
    def entries(self) -> list[TapeEntry]:
        return [
            TapeEntry(n.node_id, n.op, tuple(p.node_id for p in n._parents))
            for n in self.nodes
        ]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: DiffTensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.data.size != 1:
        raise ContractViolation(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise EmptyGradientError("root does not depend on any tensor that requires grad")
    tape = Tape(root)
    pending: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g, dtype=np.float64) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = pending.get(parent.node_id)
            pending[parent.node_id] = pg if prev is None else prev + pg


def zero_grad(params: Iterable[DiffTensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# helpers


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.reshape((-1,) + g.shape[lead:]).sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: DiffTensor, b: DiffTensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(a.data * b.data, (a, b), bw, "mul")


def scale(a, c: float) -> DiffTensor:
    a = as_tensor(a)
    c = float(c)
    return record(a.data * c, (a,), lambda g: (g * c,), "scale")


def _channel_sum(a: np.ndarray, axis: int) -> np.ndarray:
    """Sum over every axis except ``axis``."""
    if axis == a.ndim - 1:
        return a.reshape(-1, a.shape[-1]).sum(axis=0)
    return a.sum(axis=tuple(i for i in range(a.ndim) if i != axis))


def relu6(x) -> DiffTensor:
    x = as_tensor(x)

    def bw(g):
        return (g * ((x.data > 0.0) & (x.data < 6.0)),)

    return record(np.clip(x.data, 0.0, 6.0), (x,), bw, "relu6")


def prelu(x, slope, axis: int = 1) -> DiffTensor:
    """max(x, 0) + slope * min(x, 0) with one slope per channel along ``axis``."""
    x, slope = as_tensor(x), as_tensor(slope)
    axis = axis % x.ndim
    if slope.ndim != 1 or slope.shape[0] != x.shape[axis]:
        raise ContractViolation(
            f"prelu: slope shape {slope.shape} does not match axis {axis} of {x.shape}"
        )
    bshape = [1] * x.ndim
    bshape[axis] = -1
    s = slope.data.reshape(bshape)
    neg = np.minimum(x.data, 0.0)
    out = x.data + (s - 1.0) * neg

    def bw(g):
        gx = gs = None
        if x.requires_grad:
            d = (s - 1.0) * (x.data <= 0.0)
            d += 1.0
            gx = g * d
        if slope.requires_grad:
            gs = _channel_sum(g * neg, axis)
        return gx, gs

    return record(out, (x, slope), bw, "prelu")


def l2_norm(x, axis: int = -1) -> DiffTensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    x = as_tensor(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=axis))

    def bw(g):
        nk = np.expand_dims(n, axis)
        safe = np.where(nk > 0.0, nk, 1.0)
        return (np.where(nk > 0.0, np.expand_dims(g, axis) * x.data / safe, 0.0),)

    return record(n, (x,), bw, "l2_norm")


# ---------------------------------------------------------------------------
# shape and reductions


def reshape(x, shape) -> DiffTensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return record(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes: Sequence[int]) -> DiffTensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def sum_(x, axis=None, keepdims: bool = False) -> DiffTensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(np.asarray(out, dtype=np.float64), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> DiffTensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# contractions


def matmul(a, b) -> DiffTensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ContractViolation(f"matmul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), bw, "matmul")


def _parse_subscripts(subscripts: str) -> tuple[str, str, str]:
    try:
        lhs, out = subscripts.replace(" ", "").split("->")
        sa, sb = lhs.split(",")
    except ValueError:
        raise ContractViolation(f"batched_contract: malformed subscripts {subscripts!r}") from None
    for s in (sa, sb, out):
        if len(set(s)) != len(s):
            raise ContractViolation(f"batched_contract: repeated index in {s!r}")
    for i in sa + sb:
        if i not in out and not (i in sa and i in sb):
            raise ContractViolation(f"batched_contract: index {i!r} is summed in one operand only")
    for i in out:
        if i not in sa and i not in sb:
            raise ContractViolation(f"batched_contract: output index {i!r} not in inputs")
    return sa, sb, out


def _einsum2(sa: str, sb: str, out: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Two-operand einsum lowered to a single batched matmul."""
    dims: dict[str, int] = {}
    for s, arr in ((sa, a), (sb, b)):
        for i, n in zip(s, arr.shape):
            if dims.setdefault(i, n) != n:
                raise ContractViolation(
                    f"batched_contract: index {i!r} has sizes {dims[i]} and {n} "
                    f"(shapes {a.shape} and {b.shape})"
                )
    batch = [i for i in out if i in sa and i in sb]
    contr = [i for i in sa if i in sb and i not in out]
    akeep = [i for i in sa if i not in sb]
    bkeep = [i for i in sb if i not in sa]

    def size(idx):
        return int(np.prod([dims[i] for i in idx])) if idx else 1

    at = np.transpose(a, [sa.index(i) for i in batch + akeep + contr])
    bt = np.transpose(b, [sb.index(i) for i in batch + contr + bkeep])
    r = np.matmul(
        at.reshape(size(batch), size(akeep), size(contr)),
        bt.reshape(size(batch), size(contr), size(bkeep)),
    )
    cur = batch + akeep + bkeep
    r = r.reshape([dims[i] for i in cur])
    return np.transpose(r, [cur.index(i) for i in out])


def batched_contract(subscripts: str, a, b) -> DiffTensor:
    """Einsum-style contraction of two tensors, e.g. ``"tsv,ncvs->ncvt"``."""
    a, b = as_tensor(a), as_tensor(b)
    sa, sb, out = _parse_subscripts(subscripts)
    if len(sa) != a.ndim or len(sb) != b.ndim:
        raise ContractViolation(
            f"batched_contract: {subscripts!r} does not match shapes {a.shape} and {b.shape}"
        )
    res = _einsum2(sa, sb, out, a.data, b.data)

    def bw(g):
        ga = _einsum2(out, sb, sa, g, b.data) if a.requires_grad else None
        gb = _einsum2(out, sa, sb, g, a.data) if b.requires_grad else None
        return ga, gb

    return record(np.ascontiguousarray(res), (a, b), bw, "batched_contract")


def conv_time(x, w, bias=None, axis: int = -2) -> DiffTensor:
    """Same-length convolution along ``axis`` with channels on the last axis.

    ``w`` is ``[k, C_in, C_out]`` with odd ``k``; the sequence is zero padded by
    ``(k - 1) // 2`` on both sides and
    ``out[.., l, .., o] = sum_j sum_i x_pad[.., l + j, .., i] * w[j, i, o] + bias[o]``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 3 or x.ndim < 2 or x.shape[-1] != w.shape[1]:
        raise ContractViolation(f"conv_time: input {x.shape} and kernel {w.shape} do not conform")
    axis = axis % x.ndim
    if axis == x.ndim - 1:
        raise ContractViolation("conv_time: the time axis cannot be the channel axis")
    k = w.shape[0]
    if k % 2 == 0:
        raise ContractViolation(f"conv_time: kernel width {k} must be odd")
    L, cin, cout = x.shape[axis], w.shape[1], w.shape[2]
    p = (k - 1) // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (p, p)
    xp = np.pad(x.data, pad) if p else x.data
    out_shape = x.shape[:-1] + (cout,)
    full_shape = xp.shape[:-1] + (cout,)

    def window(arr, j):
        idx = [slice(None)] * arr.ndim
        idx[axis] = slice(j, j + L)
        return arr[tuple(idx)]

    flat = xp.reshape(-1, cin)
    out = np.zeros(out_shape)
    for j in range(k):
        out += window((flat @ w.data[j]).reshape(full_shape), j)
    parents: tuple[DiffTensor, ...] = (x, w)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ContractViolation(f"conv_time: bias {bias.shape} does not match {cout} outputs")
        out += bias.data
        parents = (x, w, bias)

    def bw(g):
        gx = gw = None
        gp = np.pad(g, pad) if p else g
        gflat = gp.reshape(-1, cout)
        if x.requires_grad:
            gx = np.zeros(x.shape)
            for j in range(k):
                # x_pad[l + j] feeds out[l]; on the padded grid that is a shift by p - j.
                gx += window((gflat @ w.data[j].T).reshape(xp.shape), 2 * p - j)
        if w.requires_grad:
            gw = np.empty(w.shape)
            for j in range(k):
                gw[j] = window(xp, j).reshape(-1, cin).T @ g.reshape(-1, cout)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, cout).sum(axis=0) if bias.requires_grad else None)
        return grads

    return record(out, parents, bw, "conv_time")


# ---------------------------------------------------------------------------
# normalization


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    axis: int = 1,
    momentum: float = 0.1,
    eps: float = 1e-5,
    training: bool = True,
) -> DiffTensor:
    """Per-channel normalization over every axis except ``axis``.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, as torch does). In eval mode the
    running buffers are used and left untouched.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axis = axis % x.ndim
    C = x.shape[axis]
    for name, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (C,):
            raise ContractViolation(f"batch_norm: {name} shape {arr.shape} does not match {C} channels of {x.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = C
    gm = gamma.data.reshape(bshape)
    m = x.data.size // C

    def csum(a):
        return _channel_sum(a, axis).reshape(bshape)

    if training:
        mu = csum(x.data) / m
        xc = x.data - mu
        var = csum(xc * xc) / m
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(C)
        unbiased = var.reshape(C) * (m / (m - 1) if m > 1 else 1.0)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def bw(g):
            gxh = g * gm
            gx = None
            gxhat = g * xhat
            ggamma = _channel_sum(gxhat, axis)
            gbeta = _channel_sum(g, axis)
            if x.requires_grad:
                # sum(g * gamma * xhat) == gamma * ggamma, sum(g * gamma) == gamma * gbeta
                s1 = (gbeta * gamma.data).reshape(bshape)
                s2 = (ggamma * gamma.data).reshape(bshape)
                gx = (inv / m) * (m * gxh - s1 - xhat * s2)
            return gx, ggamma, gbeta

    else:
        inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * inv

        def bw(g):
            return g * (gm * inv), _channel_sum(g * xhat, axis), _channel_sum(g, axis)

    out = xhat * gm + beta.data.reshape(bshape)
    return record(out, (x, gamma, beta), bw, "batch_norm")


# ---------------------------------------------------------------------------

_KINDS: dict[str, Callable[..., DiffTensor]] = {
    "matmul": matmul,
    "batched-contract": lambda a, b, *, subscripts: batched_contract(subscripts, a, b),
    "add": add,
    "mul": mul,
    "scale": lambda a, *, factor: scale(a, factor),
    "prelu": lambda x, slope, *, axis=1: prelu(x, slope, axis),
    "relu6": relu6,
    "batch_norm": lambda x, gamma, beta, **attrs: batch_norm(x, gamma, beta, **attrs),
    "conv_time": lambda x, w, bias=None, *, axis=-2: conv_time(x, w, bias, axis),
}


def tensor_op(kind: str, inputs: Sequence, **attrs) -> DiffTensor:
    """Dispatch one of the supported op kinds by name."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ContractViolation(f"unknown op kind {kind!r}; expected one of {sorted(_KINDS)}") from None
    return fn(*inputs, **attrs)


OP_KINDS = tuple(_KINDS)
