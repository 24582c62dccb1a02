"""Small reverse-mode autodiff engine over numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its operands and
an adjoint rule mapping the output adjoint to one adjoint per operand.
Broadcasting is limited to tensor/scalar pairs; ``add_bias`` and
``broadcast_to`` cover the remaining cases the networks need.

All values are float64.
"""

from __future__ import annotations

import builtins
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


Rule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    After :func:`backward` on a scalar root, every leaf created with
    ``requires_grad=True`` holds the accumulated adjoint in ``grad``.
    Repeated ``backward`` calls keep accumulating; call :meth:`zero_grad`
    between them if that is not wanted.
    """

    __slots__ = ("values", "requires_grad", "grad", "parents", "rule", "op")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.rule: Rule | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return self.rule is None

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.values.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

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


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values: np.ndarray, parents: Sequence[Tensor], op: str, rule: Rule) -> Tensor:
    out = Tensor(values)
    out.op = op
    if builtins.any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.rule = rule
    return out


def _check_same_or_scalar(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # undo a tensor/scalar broadcast
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands ``[m, k] @ [k, n]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    return _node(av @ bv, (a, b), "matmul", lambda g: (g @ bv.T, av.T @ g))


def _im2col(x: np.ndarray) -> np.ndarray:
    # (B, C, H, W) -> (B, H, W, C*9), one-cell zero padding
    B, C, H, W = x.shape
    xp = np.zeros((B, C, H + 2, W + 2))
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((B, H, W, C, 3, 3))
    for di in range(3):
        for dj in range(3):
            cols[..., di, dj] = xp[:, :, di : di + H, dj : dj + W].transpose(0, 2, 3, 1)
    return cols.reshape(B, H, W, C * 9)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    B, C, H, W = shape
    cols = cols.reshape(B, H, W, C, 3, 3)
    xp = np.zeros((B, C, H + 2, W + 2))
    for di in range(3):
        for dj in range(3):
            xp[:, :, di : di + H, dj : dj + W] += cols[..., di, dj].transpose(0, 3, 1, 2)
    return xp[:, :, 1:-1, 1:-1]


def conv2d_zero_pad(x, kernels) -> Tensor:
    """3x3 cross-correlation, stride 1, one-cell zero padding.

    ``x`` is ``[C, H, W]`` or batched ``[B, C, H, W]``; ``kernels`` is
    ``[K, C, 3, 3]``.  Spatial extents are preserved.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    kv = kernels.values
    if kv.ndim != 4 or kv.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d_zero_pad: kernels must be [K, C, 3, 3], got {kv.shape}")
    single = x.values.ndim == 3
    xv = x.values[None] if single else x.values
    if xv.ndim != 4 or xv.shape[1] != kv.shape[1]:
        raise DimensionError(
            f"conv2d_zero_pad: input {x.shape} does not match kernel channels {kv.shape}"
        )
    B, C, H, W = xv.shape
    K = kv.shape[0]
    cols = _im2col(xv).reshape(-1, C * 9)
    kmat = kv.reshape(K, C * 9)
    out = (cols @ kmat.T).reshape(B, H, W, K).transpose(0, 3, 1, 2)

    def rule(g):
        gb = g[None] if single else g
        gflat = gb.transpose(0, 2, 3, 1).reshape(-1, K)
        gk = (gflat.T @ cols).reshape(kv.shape) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = _col2im(gflat @ kmat, (B, C, H, W))
            gx = gx[0] if single else gx
        return gx, gk

    out = np.ascontiguousarray(out[0] if single else out)
    return _node(out, (x, kernels), "conv2d", rule)


def reverse_width(x, sign_mask: Sequence[float]) -> Tensor:
    """Reverse the width (last) axis and multiply channel ``c`` by ``sign_mask[c]``.

    Channels are the third axis from the end, so ``[C, H, W]`` and batched
    ``[..., C, H, W]`` inputs both work.  The map is its own inverse and
    its own adjoint.
    """
    x = _as_tensor(x)
    signs = np.asarray(sign_mask, dtype=np.float64)
    if x.values.ndim < 3 or signs.shape != (x.shape[-3],):
        raise DimensionError(f"reverse_width: mask of length {signs.size} for input {x.shape}")
    if not np.all(np.abs(signs) == 1.0):
        raise DomainError("reverse_width: sign mask entries must be +1 or -1")
    s = signs.reshape(-1, 1, 1)

    def apply(v):
        return v[..., ::-1] * s

    return _node(apply(x.values), (x,), "reverse_width", lambda g: (apply(g),))


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "add")
    return _node(
        a.values + b.values, (a, b), "add", lambda g: (_fit(g, a.shape), _fit(g, b.shape))
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "sub")
    return _node(
        a.values - b.values, (a, b), "sub", lambda g: (_fit(g, a.shape), _fit(-g, b.shape))
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "mul")
    av, bv = a.values, b.values
    return _node(
        av * bv, (a, b), "mul", lambda g: (_fit(g * bv, a.shape), _fit(g * av, b.shape))
    )


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _node(a.values * c, (a,), "scale", lambda g: (g * c,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def add_bias(x, bias) -> Tensor:
    """Add a vector ``bias`` of shape ``[n]`` to every row of ``x`` (``[..., n]``)."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if bias.values.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match rows of {x.shape}")
    n = bias.shape[0]
    return _node(
        x.values + bias.values, (x, bias), "add_bias", lambda g: (g, g.reshape(-1, n).sum(axis=0))
    )


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.values)
    return _node(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    v = a.values
    # sigmoid(v) = exp(-softplus(-v)), stable for large |v|
    return _node(
        np.logaddexp(0.0, v), (a,), "softplus", lambda g: (g * np.exp(-np.logaddexp(0.0, -v)),)
    )


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.values)
    return _node(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    v = a.values
    if np.any(~(v > 0.0)):
        raise DomainError("log: argument must be strictly positive")
    return _node(np.log(v), (a,), "log", lambda g: (g / v,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    v = a.values
    return _node(v * v, (a,), "square", lambda g: (2.0 * g * v,))


def sum(a, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    a = _as_tensor(a)

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(a.values.sum(axis=axis)), (a,), "sum", rule)


def mean(a, axis: int | tuple[int, ...] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    total = sum(a, axis=axis)
    # divide rather than scale by 1/n so the result matches np.mean bit for bit
    return _node(total.values / n, (total,), "mean", lambda g: (g / n,))


def min_pairwise(a, b) -> Tensor:
    """Elementwise minimum; on ties the adjoint goes to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "min_pairwise")
    take_a = a.values <= b.values
    out = np.where(take_a, a.values, b.values)
    return _node(
        out,
        (a, b),
        "min",
        lambda g: (_fit(np.where(take_a, g, 0.0), a.shape), _fit(np.where(take_a, 0.0, g), b.shape)),
    )


def clip_by_value(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``.  The adjoint is zero wherever the clamp is active."""
    a = _as_tensor(a)
    v = a.values
    inside = (v >= lo) & (v <= hi)
    return _node(np.clip(v, lo, hi), (a,), "clip", lambda g: (np.where(inside, g, 0.0),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _node(a.values.reshape(tuple(shape)), (a,), "reshape", lambda g: (g.reshape(old),))


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    """Explicitly replicate ``a`` (numpy trailing-axis rules) to ``shape``."""
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.values, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc
    lead = len(shape) - a.values.ndim

    def rule(g):
        r = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(a.shape) if n == 1 and r.shape[i] != 1)
        if axes:
            r = r.sum(axis=axes, keepdims=True)
        return (r,)

    return _node(out, (a,), "broadcast", rule)


def roll(a, shift: int, axis: int = -1) -> Tensor:
    """Circular shift along ``axis`` (numpy semantics)."""
    a = _as_tensor(a)
    return _node(
        np.roll(a.values, shift, axis=axis), (a,), "roll", lambda g: (np.roll(g, -shift, axis=axis),)
    )


def concat(items: Sequence, axis: int = -1) -> Tensor:
    items = [_as_tensor(t) for t in items]
    sizes = [t.shape[axis] for t in items]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.values for t in items], axis=axis)
    return _node(out, items, "concat", lambda g: tuple(np.split(g, cuts, axis=axis)))


def gaussian_logpdf(x, mean_, log_std) -> Tensor:
    """Elementwise log density of N(mean, exp(log_std)^2) evaluated at ``x``."""
    x, mean_, log_std = _as_tensor(x), _as_tensor(mean_), _as_tensor(log_std)
    if not (x.shape == mean_.shape == log_std.shape):
        raise DimensionError(
            f"gaussian_logpdf: shapes {x.shape}, {mean_.shape}, {log_std.shape} differ"
        )
    inv_std = np.exp(-log_std.values)
    z = (x.values - mean_.values) * inv_std
    out = -0.5 * z * z - log_std.values - 0.5 * LOG_2PI

    def rule(g):
        gx = -g * z * inv_std
        return gx, -gx, g * (z * z - 1.0)

    return _node(out, (x, mean_, log_std), "gaussian_logpdf", rule)


# ---------------------------------------------------------------------------
# reverse pass


def topological_order(root: Tensor) -> list[Tensor]:
    """Grad-enabled nodes reachable from ``root``; operands precede their users."""
    order: list[Tensor] = []
    seen: set[int] = set()
    work: list[tuple[Tensor, bool]] = [(root, False)]
    while work:
        node, done = work.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        work.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                work.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``grad`` of every grad-enabled leaf.

    Each recorded node is visited once; adjoints of shared subexpressions add up.
    """
    if root.size != 1:
        raise UsageError(f"backward: root must be scalar-shaped, got {root.shape}")
    if not root.requires_grad:
        raise UsageError("backward: root does not depend on any grad-enabled tensor")
    adj: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in reversed(topological_order(root)):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node.rule is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=np.float64).reshape(node.shape)
            else:
                node.grad = node.grad + g
            continue
        for p, gp in zip(node.parents, node.rule(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            adj[key] = adj[key] + gp if key in adj else gp


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment buffers for a fixed list of parameters."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Iterable[Tensor], **kw) -> AdamState:
        params = list(params)
        return cls(m=[np.zeros(p.shape) for p in params], v=[np.zeros(p.shape) for p in params], **kw)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float,
) -> None:
    """One bias-corrected Adam update applied in place; ``None`` grads count as zero."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise UsageError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} state slots"
        )
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
