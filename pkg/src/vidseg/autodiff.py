"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is define-by-run: every op that touches a tensor requiring
gradients records its parents and a backward closure on the output node.
``backward`` on a scalar walks the recorded nodes in reverse topological
order and accumulates gradients into the leaves. There is no implicit
broadcasting; shapes must conform exactly except where an op's own
semantics say otherwise (scalar scaling, linear/layer-norm affine
parameters, conv bias).

A graph and its tensors belong to one execution context at a time; there
is no internal locking. Values are safe to hand to another context after
a forward/backward completes; parallel work needs independent graphs.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeMismatchError",
    "NonFiniteError",
    "AutodiffError",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "take_rows",
    "slice_axis",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "layer_norm",
    "l2_normalize",
    "linear",
    "conv1d",
    "bce_with_logits",
    "reduce_sum",
    "reduce_mean",
]


class AutodiffError(Exception):
    """Base class for graph construction and execution errors."""


class ShapeMismatchError(AutodiffError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {self.shapes}")


class NonFiniteError(AutodiffError):
    def __init__(self, op: str, shape):
        self.op = op
        super().__init__(f"{op}: produced non-finite values (shape {tuple(shape)})")


class Tensor:
    """A dense float64 array, optionally a node in the autodiff graph.

    ``grad`` accumulates across repeated backward calls; reset it by
    assigning None (training loops do this between steps).
    """

    __slots__ = ("data", "requires_grad", "grad", "_op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor", arr.shape)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._op = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise AutodiffError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        ``self`` must be a scalar. Visits nodes in exact reverse
        topological order; repeated calls accumulate into ``grad``.
        """
        if self.data.ndim != 0:
            raise AutodiffError(
                f"backward: loss must be a scalar, got shape {self.shape}"
            )
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._op is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar used throughout the model code.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from root, root first (reverse topological)."""
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
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _result(op: str, out: np.ndarray, parents, backward) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(op, out.shape)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._op = op
        t._parents = tuple(parents)
        t._backward = backward
    else:
        t.requires_grad = False
        t._op = None
        t._parents = ()
        t._backward = None
    return t


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# Elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _result(
        "mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data)
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        return (g / b.data, -g * a.data / (b.data * b.data))

    return _result("div", out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result("scale", a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _result("relu", a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result("log", out, (a,), lambda g: (g / a.data,))


# ---------------------------------------------------------------------------
# Shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def backward(g):
        return (g @ _swap_last(b.data), _swap_last(a.data) @ g)

    return _result("matmul", out, (a, b), backward)


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatchError("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _result(
        "transpose",
        np.transpose(a.data, axes),
        (a,),
        lambda g: (np.transpose(g, inverse),),
    )


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeMismatchError("reshape", a.shape, shape)
    old = a.shape
    return _result(
        "reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),)
    )


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise AutodiffError("concat: no inputs")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis
        ):
            raise ShapeMismatchError("concat", tensors[0].shape, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(
        "concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward
    )


def take_rows(a: Tensor, indices) -> Tensor:
    """Select rows (axis 0) by index; duplicate indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[0])):
        raise ShapeMismatchError("take_rows", a.shape, idx.shape)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result("take_rows", a.data[idx].copy(), (a,), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    n = a.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeMismatchError("slice", a.shape, (axis, start, stop))
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _result("slice", a.data[index].copy(), (a,), backward)


# ---------------------------------------------------------------------------
# Reductions


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = a.data.sum()
        return _result(
            "sum", np.asarray(out), (a,), lambda g: (np.full(a.shape, g),)
        )
    axis = int(axis)
    out = a.data.sum(axis=axis)

    def backward(g):
        return (np.repeat(np.expand_dims(g, axis), a.shape[axis], axis=axis),)

    return _result("sum", out, (a,), backward)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise AutodiffError("mean: reduction over zero elements")
    return scale(reduce_sum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# Normalizations and fused NN primitives


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] == 0:
        raise AutodiffError(f"softmax: empty axis {axis} of shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _result("softmax", out, (a,), backward)


_LN_EPS = 1e-12


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = _LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    c = a.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatchError("layer_norm", a.shape, gamma.shape, beta.shape)
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    norm = centered * inv
    out = norm * gamma.data + beta.data

    def backward(g):
        gy = g * gamma.data
        # d/dx of (x - mean) * inv with mean/var functions of x.
        gmean = gy.mean(axis=-1, keepdims=True)
        gnorm = (gy * norm).mean(axis=-1, keepdims=True)
        ga = inv * (gy - gmean - norm * gnorm)
        axes = tuple(range(a.ndim - 1))
        ggamma = (g * norm).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        return (ga, ggamma, gbeta)

    return _result("layer_norm", out, (a, gamma, beta), backward)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Rescale each last-axis row to (near) unit Euclidean norm."""
    sq = (a.data * a.data).sum(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(sq + eps)
    out = a.data * inv

    def backward(g):
        dot = (g * a.data).sum(axis=-1, keepdims=True)
        return (g * inv - a.data * (dot * inv**3),)

    return _result("l2_normalize", out, (a,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) over the last axis; leading axes are carried through."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeMismatchError("linear", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeMismatchError("linear", w.shape, b.shape)
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, w.shape[1])
        grads = [gx, gw]
        if b is not None:
            grads.append(g.reshape(-1, w.shape[1]).sum(axis=0))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _result("linear", out, parents, backward)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Temporal convolution with zero same-padding at the sequence ends.

    x: (T, C_in) or (B, T, C_in); w: (K, C_in, C_out) with K odd; b: (C_out,).
    """
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if x.ndim not in (2, 3) or w.ndim != 3 or xd.shape[-1] != w.shape[1]:
        raise ShapeMismatchError("conv1d", x.shape, w.shape)
    k = w.shape[0]
    if k % 2 == 0:
        raise AutodiffError(f"conv1d: kernel width must be odd, got {k}")
    if b is not None and b.shape != (w.shape[2],):
        raise ShapeMismatchError("conv1d", w.shape, b.shape)
    half = k // 2
    t = xd.shape[1]
    out = np.zeros(xd.shape[:2] + (w.shape[2],), dtype=np.float64)
    for tap in range(k):
        shift = tap - half
        lo, hi = max(0, -shift), min(t, t - shift)
        if lo < hi:
            out[:, lo:hi] += xd[:, lo + shift : hi + shift] @ w.data[tap]
    if b is not None:
        out = out + b.data
    if squeeze:
        out = out[0]

    def backward(g):
        gd = g[None] if squeeze else g
        gx = np.zeros_like(xd)
        gw = np.zeros_like(w.data)
        for tap in range(k):
            shift = tap - half
            lo, hi = max(0, -shift), min(t, t - shift)
            if lo < hi:
                gx[:, lo + shift : hi + shift] += gd[:, lo:hi] @ w.data[tap].T
                gw[tap] += np.einsum(
                    "bti,bto->io", xd[:, lo + shift : hi + shift], gd[:, lo:hi]
                )
        grads = [gx[0] if squeeze else gx, gw]
        if b is not None:
            grads.append(gd.reshape(-1, w.shape[2]).sum(axis=0))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _result("conv1d", out, parents, backward)


def bce_with_logits(logits: Tensor, target: Tensor) -> Tensor:
    """Elementwise sigmoid cross-entropy, stable at saturated logits.

    The target is treated as a constant; no gradient flows to it.
    """
    _same_shape("bce_with_logits", logits, target)
    x, t = logits.data, target.data
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        pos = x >= 0
        s = np.empty_like(x)
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ez = np.exp(x[~pos])
        s[~pos] = ez / (1.0 + ez)
        return (g * (s - t), None)

    return _result("bce_with_logits", out, (logits, target), backward)
