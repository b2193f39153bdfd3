"""Dense-tensor algebra with reverse-mode automatic differentiation.

The graph is define-by-run: every operation on grad-requiring tensors records
its parents and a backward closure on the output tensor. ``backward`` linearises
the graph reachable from a scalar into a :class:`Tape` (parents always precede
children) and replays it once in reverse, accumulating gradients in tape order
so repeated backward passes are bit-for-bit identical.

Values default to float64; ops preserve the dtype of their inputs so a float32
fast path is available by constructing float32 leaves.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DomainError, ShapeError

_uid_counter = itertools.count()


class Tensor:
    """A dense multi-dimensional array that can participate in a tape.

    ``data`` is treated as immutable while a graph built from it is alive;
    in-place parameter updates are only legal between forward passes.
    """

    __slots__ = ("data", "requires_grad", "grad", "uid", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.uid = next(_uid_counter)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward_fn is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Convenience method forms of the module-level ops.
    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


def make_op(
    data: np.ndarray,
    parents: Iterable[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    """Wrap an op result, recording it on the graph iff a parent needs grad.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    parent. Extension point for fused ops defined outside this module.
    """
    parents = tuple(parents)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward_fn = backward_fn
        out._op = op
    return out


class Tape:
    """Topologically ordered list of the nodes reachable from a root.

    Built by iterative post-order traversal of parent links, so every node's
    parents precede it and each node appears exactly once.
    """

    def __init__(self, root: Tensor):
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if node.uid in seen:
                continue
            seen.add(node.uid)
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.uid not in seen:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.nodes)


class GradientMap:
    """Gradients keyed by tensor uid; absent tensors read as zero."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def wrt(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(t.uid)
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return t.uid in self._grads


def backward(scalar: Tensor) -> GradientMap:
    """Reverse-mode pass from a single-element tensor.

    Populates ``.grad`` on every requires_grad leaf reachable from ``scalar``
    and returns the full gradient map. Leaves that never reached the tape are
    reported as zero by the map.
    """
    if scalar.data.size != 1:
        raise ContractError(f"backward() needs a scalar, got shape {scalar.shape}")
    tape = Tape(scalar)
    grads: dict[int, np.ndarray] = {scalar.uid: np.ones_like(scalar.data)}
    for node in reversed(tape.nodes):
        gout = grads.get(node.uid)
        if gout is None or node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(gout)
        for parent, g in zip(node._parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            acc = grads.get(parent.uid)
            grads[parent.uid] = g if acc is None else acc + g
    for node in tape.nodes:
        if node.is_leaf and node.requires_grad:
            node.grad = grads.get(node.uid, np.zeros_like(node.data))
    return GradientMap(grads)


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Row-batched dense layer: out[r, c] = sum_k x[r, k] w[k, c] + b[c]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(
            f"affine expects x:2d, w:2d, b:1d, got {x.shape}, {w.shape}, {b.shape}"
        )
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"affine dimension mismatch: {x.shape} @ {w.shape} + {b.shape}")
    out = x.data @ w.data + b.data

    def bwd(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return make_op(out, (x, w, b), bwd, "affine")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return make_op(out, (a, b), bwd, "matmul")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    return make_op(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} requires equal shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def neg(x: Tensor) -> Tensor:
    return make_op(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log requires strictly positive values")
    return make_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def add_const(x: Tensor, c: float) -> Tensor:
    return make_op(x.data + c, (x,), lambda g: (g,), "add_const")


def mul_const(x: Tensor, c: float) -> Tensor:
    return make_op(x.data * c, (x,), lambda g: (g * c,), "mul_const")


_ELEMENTWISE = {"exp": exp, "log": log, "relu": relu, "neg": neg}


def elementwise(x: Tensor, kind: str, const: float | None = None) -> Tensor:
    """Dispatch over the supported pointwise kinds."""
    if kind in _ELEMENTWISE:
        return _ELEMENTWISE[kind](x)
    if kind == "add_const":
        if const is None:
            raise ContractError("add_const needs a constant")
        return add_const(x, const)
    if kind == "mul_const":
        if const is None:
            raise ContractError("mul_const needs a constant")
        return mul_const(x, const)
    raise ContractError(f"unknown elementwise kind {kind!r}")


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    return make_op(out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.data.dtype),), "sum_all")


def reduce_logsumexp(x: Tensor, axis: int) -> Tensor:
    """Numerically stable log-sum-exp along one axis."""
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    axis = axis % nd
    if x.shape[axis] == 0:
        raise ShapeError("reduce_logsumexp over an empty axis")
    m = x.data.max(axis=axis, keepdims=True)
    shifted = np.exp(x.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(total), axis=axis)

    def bwd(g):
        soft = shifted / total
        return (np.expand_dims(g, axis) * soft,)

    return make_op(out, (x,), bwd, "logsumexp")


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each row of a matrix to unit Euclidean norm."""
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize expects a matrix, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateInputError("l2_normalize: zero row")
    y = x.data / norms

    def bwd(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * inner) / norms,)

    return make_op(y, (x,), bwd, "l2_normalize")


def conv2d(x: Tensor, k: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation of a B,C,H,W batch with an F,C,k,k kernel.

    Implemented as im2col + matmul so both passes run through BLAS.
    """
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape}, {k.shape}")
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    batch, cin, h, w = x.shape
    fout, kc, kh, kw = k.shape
    if kc != cin:
        raise ShapeError(f"kernel channels {kc} != input channels {cin}")
    if kh > h or kw > w:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    hout = (h - kh) // stride + 1
    wout = (w - kw) // stride + 1

    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * hout * wout, cin * kh * kw)
    kmat = k.data.reshape(fout, cin * kh * kw)
    out = (cols @ kmat.T).reshape(batch, hout, wout, fout).transpose(0, 3, 1, 2)

    def bwd(g):
        gcols = g.transpose(0, 2, 3, 1).reshape(batch * hout * wout, fout)
        gk = (gcols.T @ cols).reshape(fout, cin, kh, kw)
        gwin = (gcols @ kmat).reshape(batch, hout, wout, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gx = np.zeros_like(x.data)
        for u in range(kh):
            for v in range(kw):
                gx[:, :, u : u + stride * hout : stride, v : v + stride * wout : stride] += gwin[
                    ..., u, v
                ]
        return gx, gk

    return make_op(np.ascontiguousarray(out), (x, k), bwd, "conv2d")


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias to a B,C,H,W activation."""
    if x.data.ndim != 4 or b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ShapeError(f"channel bias {b.shape} incompatible with input {x.shape}")
    out = x.data + b.data[None, :, None, None]
    return make_op(out, (x, b), lambda g: (g, g.sum(axis=(0, 2, 3))), "add_channel_bias")


def spatial_mean(x: Tensor) -> Tensor:
    """Global average pool: B,C,H,W -> B,C."""
    if x.data.ndim != 4:
        raise ShapeError(f"spatial_mean expects 4-d input, got {x.shape}")
    _, _, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None], x.shape) / (h * w),)

    return make_op(out, (x,), bwd, "spatial_mean")


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_gradient(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar-valued function at ``x``.

    Independent of the tape: every probe point is evaluated through a fresh
    non-grad tensor.
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    base = np.array(x.data, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f(Tensor(base.copy())).item()
        flat[i] = orig - eps
        f_minus = f(Tensor(base.copy())).item()
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return Tensor(grad.reshape(base.shape))


def max_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Largest elementwise deviation, relative to the gradient magnitude.

    The denominator is floored at 1 so near-zero gradients are compared
    absolutely instead of amplifying finite-difference round-off.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(1.0, float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)))
    return float(np.abs(a - b).max(initial=0.0)) / scale
