"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every operation on tensors that need
gradients records its inputs and a backward rule; :meth:`Tensor.backward`
replays that graph in reverse topological order and accumulates gradients
into the leaf tensors.

Two precision modes exist: ``reference`` (float64, the default) and ``fast``
(float32). The mode is read from the ``SEQFN_MODE`` environment variable the
first time it is needed and can be changed with :func:`set_mode`.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

_DTYPES = {"reference": np.float64, "fast": np.float32}
_mode: str | None = None
_grad_enabled = True


def get_mode() -> str:
    global _mode
    if _mode is None:
        mode = os.environ.get("SEQFN_MODE", "reference").strip().lower() or "reference"
        if mode not in _DTYPES:
            raise ValueError(f"SEQFN_MODE must be one of {sorted(_DTYPES)}, got {mode!r}")
        _mode = mode
    return _mode


def set_mode(mode: str) -> None:
    global _mode
    if mode not in _DTYPES:
        raise ValueError(f"mode must be one of {sorted(_DTYPES)}, got {mode!r}")
    _mode = mode


def default_dtype() -> type:
    return _DTYPES[get_mode()]


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch precision mode."""
    previous = get_mode()
    set_mode(mode)
    try:
        yield
    finally:
        set_mode(previous)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """n-dimensional float array that can take part in gradient computation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = ""

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'!r})"

    # -- autodiff ---------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf.

        Leaf gradients add up across calls; reset them (``zero_grad``)
        between backward passes.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")

        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- operator sugar ---------------------------------------------------

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return reduce("mean", self, axis, keepdims)

    def max(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> Tensor:
        return exp(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# -- broadcasting helpers -------------------------------------------------


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...], op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}") from None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise binary ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return Tensor._result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return Tensor._result(out, (a, b), backward, "div")


# -- elementwise unary ----------------------------------------------------


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return Tensor._result(np.log(x), (a,), lambda g: (g / x,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x); identity above 30 where the correction is below float64 eps
    safe = np.minimum(x, 30.0)
    return np.where(x > 30.0, x, np.log1p(np.exp(safe))).astype(x.dtype, copy=False)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return Tensor._result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return Tensor._result(_softplus(x), (a,), lambda g: (g * _sigmoid(x),), "softplus")


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    return Tensor._result(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),), "silu")


def relu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return Tensor._result(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),), "relu")


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name: add, mul, sub, exp, softplus, silu, sigmoid, neg."""
    binary = {"add": add, "mul": mul, "sub": sub}
    unary = {"exp": exp, "softplus": softplus, "silu": silu, "sigmoid": sigmoid, "neg": neg, "relu": relu}
    if op in binary:
        if b is None:
            raise TypeError(f"{op} needs two operands")
        return binary[op](a, b)
    if op in unary:
        return unary[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


def where(mask: np.ndarray, a, fill: float) -> Tensor:
    """``a`` where ``mask`` is true, constant ``fill`` elsewhere."""
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, a.data, fill).astype(a.data.dtype, copy=False)
    return Tensor._result(out, (a,), lambda g: (np.where(mask, g, 0.0),), "where")


# -- linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` for a of shape (..., m, k) and b of shape (k, n) or (..., k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions do not agree for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._result(ad @ bd, (a, b), backward, "matmul")


# -- reductions and shape -------------------------------------------------


def reduce(op: str, a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axis`` (all elements when None).

    Max sends the whole gradient to the first maximal element on ties.
    """
    a = as_tensor(a)
    x = a.data
    if axis is not None:
        if not -x.ndim <= axis < x.ndim:
            raise ShapeError(f"reduce: axis {axis} out of range for shape {x.shape}")
        axis = axis % x.ndim

    def expand(g):
        if axis is None:
            return np.broadcast_to(g.reshape((1,) * x.ndim), x.shape)
        return np.broadcast_to(g if keepdims else np.expand_dims(g, axis), x.shape)

    if op == "sum":
        out = np.asarray(x.sum(axis=axis, keepdims=keepdims))
        return Tensor._result(out, (a,), lambda g: (expand(g).copy(),), "sum")
    if op == "mean":
        n = x.size if axis is None else x.shape[axis]
        out = np.asarray(x.mean(axis=axis, keepdims=keepdims))
        return Tensor._result(out, (a,), lambda g: (expand(g) / n,), "mean")
    if op == "max":
        if axis is None:
            flat = np.argmax(x)
            out = x.reshape(-1)[flat].reshape((1,) * x.ndim if keepdims else ())

            def backward(g):
                grad = np.zeros_like(x)
                grad.reshape(-1)[flat] = g.reshape(-1)[0]
                return (grad,)

        else:
            idx = np.expand_dims(np.argmax(x, axis=axis), axis)
            out = np.take_along_axis(x, idx, axis)
            if not keepdims:
                out = np.squeeze(out, axis)

            def backward(g):
                grad = np.zeros_like(x)
                np.put_along_axis(grad, idx, g if keepdims else np.expand_dims(g, axis), axis)
                return (grad,)

        return Tensor._result(np.asarray(out), (a,), backward, "max")
    raise ValueError(f"unknown reduction {op!r}")


def reshape(a, shape: Iterable[int]) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    out = a.data.reshape(tuple(shape)).copy()
    return Tensor._result(out, (a,), lambda g: (g.reshape(original),), "reshape")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = int(ids[(ids < 0) | (ids >= vocab)].reshape(-1)[0])
        raise IndexError(f"token id {bad} out of range for vocabulary of size {vocab}")
    wd = weight.data

    def backward(g):
        grad = np.zeros_like(wd)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, wd.shape[1]))
        return (grad,)

    return Tensor._result(wd[ids], (weight,), backward, "embedding")


# -- sequence ops ---------------------------------------------------------


def rmsnorm(x, weight, eps: float = 1e-5) -> Tensor:
    """Scale each row of ``x`` to unit root-mean-square, then by ``weight``."""
    if eps <= 0:
        raise ValueError("rmsnorm eps must be positive")
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.shape != (x.shape[-1],):
        raise ShapeError(f"rmsnorm: weight shape {weight.shape} does not match feature size of {x.shape}")
    xd, wd = x.data, weight.data
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    normed = xd * r

    def backward(g):
        gw = (g * normed).reshape(-1, wd.shape[0]).sum(axis=0) if weight.requires_grad else None
        gn = g * wd
        gx = r * gn - xd * (r**3) * np.mean(gn * xd, axis=-1, keepdims=True)
        return gx, gw

    return Tensor._result(normed * wd, (x, weight), backward, "rmsnorm")


def causal_depthwise_conv1d(x, kernel, bias) -> Tensor:
    """Per-channel causal convolution over time.

    x is (..., T, C), kernel is (C, k), bias is (C,). Output position t
    mixes inputs t-k+1..t of the same channel; ``kernel[:, -1]`` weights
    the current step.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim < 2 or kernel.ndim != 2 or kernel.shape[0] != x.shape[-1] or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"causal_depthwise_conv1d: channel mismatch between x {x.shape}, kernel {kernel.shape}, bias {bias.shape}"
        )
    k = kernel.shape[1]
    if k < 1:
        raise ShapeError("kernel size must be at least 1")
    xd, kd = x.data, kernel.data
    T = xd.shape[-2]
    pad = [(0, 0)] * (xd.ndim - 2) + [(k - 1, 0), (0, 0)]
    xp = np.pad(xd, pad)
    out = np.broadcast_to(bias.data, xd.shape).copy()
    for j in range(k):
        out += xp[..., j : j + T, :] * kd[:, j]

    def backward(g):
        gx = np.zeros_like(xp)
        gk = np.empty_like(kd) if kernel.requires_grad else None
        for j in range(k):
            gx[..., j : j + T, :] += g * kd[:, j]
            if gk is not None:
                gk[:, j] = (g * xp[..., j : j + T, :]).reshape(-1, kd.shape[0]).sum(axis=0)
        gb = g.reshape(-1, kd.shape[0]).sum(axis=0) if bias.requires_grad else None
        return gx[..., k - 1 :, :], gk, gb

    return Tensor._result(out, (x, kernel, bias), backward, "causal_dwconv1d")


def conv1d_same(x, kernel, bias) -> Tensor:
    """Full (channel-mixing) convolution with zero "same" padding.

    x is (..., T, Cin), kernel is (Cout, Cin, k), bias is (Cout,). For even k
    the extra pad goes on the right, so the window is t-(k-1)//2 .. t+k//2.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim < 2 or kernel.ndim != 3 or kernel.shape[1] != x.shape[-1] or bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv1d: channel mismatch between x {x.shape}, kernel {kernel.shape}, bias {bias.shape}")
    cout, cin, k = kernel.shape
    xd, kd = x.data, kernel.data
    T = xd.shape[-2]
    left = (k - 1) // 2
    pad = [(0, 0)] * (xd.ndim - 2) + [(left, k - 1 - left), (0, 0)]
    xp = np.pad(xd, pad)
    # windows: (..., T, k, Cin) -> flattened (..., T, k*Cin)
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-2)  # (..., T, Cin, k)
    win = np.swapaxes(win, -1, -2).reshape(xd.shape[:-2] + (T, k * cin))
    wmat = np.transpose(kd, (2, 1, 0)).reshape(k * cin, cout)
    out = win @ wmat + bias.data

    def backward(g):
        gx = gk = gb = None
        if x.requires_grad:
            gwin = (g @ wmat.T).reshape(xd.shape[:-2] + (T, k, cin))
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j : j + T, :] += gwin[..., :, j, :]
            gx = gxp[..., left : left + T, :]
        if kernel.requires_grad:
            gw = win.reshape(-1, k * cin).T @ g.reshape(-1, cout)
            gk = np.transpose(gw.reshape(k, cin, cout), (2, 1, 0))
        if bias.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0)
        return gx, gk, gb

    return Tensor._result(out, (x, kernel, bias), backward, "conv1d")


# -- fused losses ---------------------------------------------------------


def cross_entropy(logits, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood in nats over unmasked positions.

    logits is (..., V); targets holds integer class ids with the leading
    shape of logits.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}")
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: every position is masked")
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    safe_t = np.where(mask, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, safe_t[..., None], np.take_along_axis(p, safe_t[..., None], -1) - 1.0, -1)
        return (p * (mask[..., None] * (g / count)),)

    return Tensor._result(np.asarray(loss, dtype=z.dtype), (logits,), backward, "cross_entropy")


def bce_with_logits(logits, labels) -> Tensor:
    """Mean binary cross-entropy of raw logits against {0,1} labels."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=logits.data.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: labels {y.shape} do not match logits {logits.shape}")
    x = logits.data
    n = x.size
    loss = (np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))).mean()
    return Tensor._result(
        np.asarray(loss, dtype=x.dtype), (logits,), lambda g: ((_sigmoid(x) - y) * (g / n),), "bce"
    )
