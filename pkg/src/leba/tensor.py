"""Dense float64 arrays plus a small reverse-mode autodiff engine.

Every vector-Jacobian product is written in terms of the same primitives as
the forward pass, so the gradient returned by :func:`grad_as_node` is an
ordinary graph node that can be differentiated again (double backward).
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operands of a primitive do not conform."""


class ContractError(ValueError):
    """A precondition of a public operation was violated."""


class UnsupportedOpError(RuntimeError):
    """A primitive on the differentiated path has no double-backward rule."""


VJP = Callable[["Node"], Sequence[Optional["Node"]]]


class Node:
    """A value in the computation graph.

    ``vjp`` maps the gradient of the output (itself a Node) to one gradient
    Node per parent, or None where a parent needs no gradient.
    """

    __slots__ = ("value", "parents", "op", "requires_grad", "vjp", "twice_differentiable")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Node", ...] = (),
        op: str = "leaf",
        requires_grad: bool = False,
        vjp: Optional[VJP] = None,
        twice_differentiable: bool = True,
    ):
        self.value = value
        self.parents = parents
        self.op = op
        self.requires_grad = requires_grad
        self.vjp = vjp
        self.twice_differentiable = twice_differentiable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Node | float") -> "Node":
        if isinstance(other, Node):
            return add(self, other)
        return add_scalar(self, float(other))

    def __sub__(self, other: "Node | float") -> "Node":
        if isinstance(other, Node):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other: "Node | float") -> "Node":
        if isinstance(other, Node):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Node":
        return mul_scalar(self, -1.0)

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)


def variable(value, requires_grad: bool = True) -> Node:
    return Node(np.array(value, dtype=DTYPE), requires_grad=requires_grad)


def constant(value) -> Node:
    return Node(np.asarray(value, dtype=DTYPE), requires_grad=False)


def make_op(
    op: str,
    value: np.ndarray,
    parents: tuple[Node, ...],
    vjp: VJP,
    twice_differentiable: bool = True,
) -> Node:
    """Record a primitive application. Constant inputs produce a constant node."""
    if not any(p.requires_grad for p in parents):
        return Node(value, op=op)
    return Node(value, parents, op, True, vjp, twice_differentiable)


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


# ---------------------------------------------------------------- elementwise


def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return make_op("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return make_op("sub", a.value - b.value, (a, b), lambda g: (g, mul_scalar(g, -1.0)))


def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)
    return make_op("mul", a.value * b.value, (a, b), lambda g: (mul(g, b), mul(g, a)))


def mul_scalar(a: Node, c: float) -> Node:
    return make_op("mul_scalar", a.value * c, (a,), lambda g: (mul_scalar(g, c),))


def add_scalar(a: Node, c: float) -> Node:
    return make_op("add_scalar", a.value + c, (a,), lambda g: (g,))


def reciprocal(a: Node) -> Node:
    out_value = 1.0 / a.value

    def vjp(g: Node):
        return (mul_scalar(mul(g, mul(out_node, out_node)), -1.0),)

    out_node = make_op("reciprocal", out_value, (a,), vjp)
    return out_node


def relu(a: Node) -> Node:
    # d/dx relu is a constant mask, so relu'' = 0 everywhere (including x = 0)
    mask = constant((a.value > 0).astype(DTYPE))
    return make_op("relu", np.maximum(a.value, 0.0), (a,), lambda g: (mul(g, mask),))


def log(a: Node) -> Node:
    return make_op("log", np.log(a.value), (a,), lambda g: (mul(g, reciprocal(a)),))


def exp(a: Node) -> Node:
    out_value = np.exp(a.value)

    def vjp(g: Node):
        return (mul(g, out_node),)

    out_node = make_op("exp", out_value, (a,), vjp)
    return out_node


# ---------------------------------------------------------------- shapes


def reshape(a: Node, shape: Sequence[int]) -> Node:
    shape = tuple(shape)
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: shapes {a.shape} and {shape} do not conform") from None
    src = a.shape
    return make_op("reshape", value, (a,), lambda g: (reshape(g, src),))


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: shapes {a.shape} and (2-D) do not conform")
    return make_op("transpose", a.value.T.copy(), (a,), lambda g: (transpose(g),))


def _sum_to_shape(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = x.ndim - len(shape)
    if lead:
        x = x.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and x.shape[i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x


def broadcast_to(a: Node, shape: Sequence[int]) -> Node:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        value = np.broadcast_to(a.value, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: shapes {a.shape} and {shape} do not conform") from None
    src = a.shape
    return make_op("broadcast_to", value, (a,), lambda g: (sum_to(g, src),))


def sum_to(a: Node, shape: Sequence[int]) -> Node:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    value = _sum_to_shape(a.value, shape)
    if value.shape != shape:
        raise ShapeError(f"sum_to: shapes {a.shape} and {shape} do not conform")
    src = a.shape
    return make_op("sum_to", value, (a,), lambda g: (broadcast_to(g, src),))


def sum(a: Node) -> Node:  # noqa: A001
    src = a.shape
    return make_op(
        "sum", np.asarray(a.value.sum(), dtype=DTYPE), (a,), lambda g: (broadcast_to(g, src),)
    )


def mean(a: Node) -> Node:
    return mul_scalar(sum(a), 1.0 / a.value.size)


def mse(a: Node, b: Node) -> Node:
    """Mean squared error between two same-shaped nodes."""
    d = sub(a, b)
    return mean(mul(d, d))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return make_op(
        "matmul",
        a.value @ b.value,
        (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


# ---------------------------------------------------------------- classification


def log_softmax(a: Node) -> Node:
    """Log-softmax over the last axis."""
    x = a.value
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    out_value = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def vjp(g: Node):
        keep = g.shape[:-1] + (1,)
        gsum = broadcast_to(sum_to(g, keep), g.shape)
        return (sub(g, mul(exp(out_node), gsum)),)

    out_node = make_op("log_softmax", out_value, (a,), vjp)
    return out_node


def softmax(a: Node) -> Node:
    return exp(log_softmax(a))


def gather(a: Node, index) -> Node:
    """Pick ``a[n, index[n]]`` from a 2-D node."""
    index = np.asarray(index, dtype=np.int64)
    if a.value.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"gather: shapes {a.shape} and {index.shape} do not conform")
    if index.size and (index.min() < 0 or index.max() >= a.shape[1]):
        raise ShapeError(f"gather: index out of range for shape {a.shape}")
    rows = np.arange(a.shape[0])
    src = a.shape
    return make_op(
        "gather", a.value[rows, index].copy(), (a,), lambda g: (scatter(g, index, src),)
    )


def scatter(g: Node, index, shape: Sequence[int]) -> Node:
    """Adjoint of :func:`gather`: place ``g[n]`` at ``(n, index[n])`` in zeros."""
    index = np.asarray(index, dtype=np.int64)
    shape = tuple(shape)
    if g.shape != (shape[0],):
        raise ShapeError(f"scatter: shapes {g.shape} and {shape} do not conform")
    value = np.zeros(shape, dtype=DTYPE)
    value[np.arange(shape[0]), index] = g.value
    return make_op("scatter", value, (g,), lambda h: (gather(h, index),))


# ---------------------------------------------------------------- convolution
#
# conv2d, conv2d_input_grad and conv2d_weight_grad are the three partial
# maps of one trilinear form <conv(x, w), g>; each one's VJP is built from the
# other two, which closes the set under repeated differentiation.


_COL_INDEX: dict[tuple[int, int, int, int], np.ndarray] = {}


def _col_index(c: int, h: int, w: int, k: int) -> np.ndarray:
    """Flat gather indices (H*W, C*k*k) into an image with one trailing zero slot.

    Out-of-bounds taps point at the zero slot, which realises 'same' zero padding.
    """
    key = (c, h, w, k)
    idx = _COL_INDEX.get(key)
    if idx is None:
        r = k // 2
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        di, dj = np.meshgrid(np.arange(k) - r, np.arange(k) - r, indexing="ij")
        yi = ii.reshape(-1, 1, 1) + di.reshape(1, 1, -1)  # HW,1,kk
        xj = jj.reshape(-1, 1, 1) + dj.reshape(1, 1, -1)
        ch = np.arange(c).reshape(1, -1, 1)
        inside = (yi >= 0) & (yi < h) & (xj >= 0) & (xj < w)
        flat = ch * h * w + np.clip(yi, 0, h - 1) * w + np.clip(xj, 0, w - 1)
        idx = np.where(inside, flat, c * h * w).reshape(h * w, c * k * k)
        _COL_INDEX[key] = idx
    return idx


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    flat = np.empty((n, c * h * w + 1), dtype=DTYPE)
    flat[:, :-1] = x.reshape(n, -1)
    flat[:, -1] = 0.0
    return flat.take(_col_index(c, h, w, k), axis=1)  # N, HW, Ckk


def _conv_np(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, _, h, wd = x.shape
    o, k = w.shape[0], w.shape[-1]
    out = _im2col(x, k) @ w.reshape(o, -1).T  # N, HW, O
    return np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(n, o, h, wd)


def _conv_input_grad_np(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    return _conv_np(g, np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)))


def _conv_weight_grad_np(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    n, c = x.shape[:2]
    o = g.shape[1]
    cols = _im2col(x, k).reshape(-1, c * k * k)  # N*HW, Ckk
    gm = g.reshape(n, o, -1).transpose(0, 2, 1).reshape(-1, o)  # N*HW, O
    return (gm.T @ cols).reshape(o, c, k, k)


def _check_conv(op: str, x_shape, w_shape) -> None:
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ShapeError(f"{op}: shapes {x_shape} and {w_shape} do not conform")
    if x_shape[1] != w_shape[1] or w_shape[2] != w_shape[3] or w_shape[2] % 2 == 0:
        raise ShapeError(f"{op}: shapes {x_shape} and {w_shape} do not conform")


def conv2d(x: Node, w: Node) -> Node:
    """Stride-1 cross-correlation with zero 'same' padding; x is N,C,H,W, w is O,C,k,k."""
    _check_conv("conv2d", x.shape, w.shape)
    k = w.shape[-1]
    return make_op(
        "conv2d",
        _conv_np(x.value, w.value),
        (x, w),
        lambda g: (conv2d_input_grad(g, w), conv2d_weight_grad(x, g, k)),
    )


def conv2d_input_grad(g: Node, w: Node) -> Node:
    if g.value.ndim != 4 or g.shape[1] != w.shape[0]:
        raise ShapeError(f"conv2d_input_grad: shapes {g.shape} and {w.shape} do not conform")
    k = w.shape[-1]
    return make_op(
        "conv2d_input_grad",
        _conv_input_grad_np(g.value, w.value),
        (g, w),
        lambda h: (conv2d(h, w), conv2d_weight_grad(h, g, k)),
    )


def conv2d_weight_grad(x: Node, g: Node, k: int) -> Node:
    if x.value.ndim != 4 or g.value.ndim != 4 or x.shape[0] != g.shape[0]:
        raise ShapeError(f"conv2d_weight_grad: shapes {x.shape} and {g.shape} do not conform")
    return make_op(
        "conv2d_weight_grad",
        _conv_weight_grad_np(x.value, g.value, k),
        (x, g),
        lambda h: (conv2d_input_grad(g, h), conv2d(x, h)),
    )


def _pool_np(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    rows = x.reshape(n, c, h // 2, 2 * w)
    rows = rows[..., :w] + rows[..., w:]
    cols = rows.reshape(n, c, h // 2, w // 2, 2)
    return (cols[..., 0] + cols[..., 1]) * 0.25


def avg_pool2(x: Node) -> Node:
    """2x2 average pooling with stride 2 over the last two axes."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: shapes {x.shape} and (even H, W) do not conform")
    return make_op("avg_pool2", _pool_np(x.value), (x,), lambda g: (upsample2(g),))


def upsample2(g: Node) -> Node:
    """Adjoint of :func:`avg_pool2`: spread each value over its 2x2 block, divided by 4."""
    value = np.repeat(np.repeat(g.value, 2, axis=2), 2, axis=3) * 0.25
    return make_op("upsample2", value, (g,), lambda h: (avg_pool2(h),))


# ---------------------------------------------------------------- differentiation


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def _gradients(root: Node, wrt: Sequence[Node], create_graph: bool) -> list[Node]:
    if root.value.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {root.shape}")
    keep = {id(w) for w in wrt}
    grads: dict[int, Node] = {}
    if root.requires_grad:
        grads[id(root)] = Node(np.ones_like(root.value))
    for node in reversed(_topo_order(root)):
        g = grads.get(id(node)) if id(node) in keep else grads.pop(id(node), None)
        if g is None or not node.parents:
            continue
        if create_graph and not node.twice_differentiable:
            raise UnsupportedOpError(f"{node.op}: no double-backward rule")
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if not create_graph:
                pg = Node(pg.value)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else add(prev, pg)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(g if g is not None else Node(np.zeros(w.shape, dtype=DTYPE)))
    return out


def backward(root: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
    """Gradients of a scalar root with respect to each node in ``wrt``.

    Nodes that do not influence the root get a zero array of their shape.
    """
    return [g.value for g in _gradients(root, list(wrt), create_graph=False)]


def grad_as_node(root: Node, wrt: Node) -> Node:
    """Like :func:`backward` but the gradient is a differentiable graph node."""
    return _gradients(root, [wrt], create_graph=True)[0]


def release(root: Node) -> None:
    """Drop graph references below ``root`` so the arrays can be collected."""
    stack = [root]
    while stack:
        node = stack.pop()
        stack.extend(node.parents)
        node.parents = ()
        node.vjp = None


# ---------------------------------------------------------------- smoothing


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ContractError(f"gaussian_kernel: size must be odd and positive, got {size}")
    if sigma <= 0:
        raise ContractError(f"gaussian_kernel: sigma must be positive, got {sigma}")
    r = np.arange(size, dtype=DTYPE) - size // 2
    k = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma**2))
    return k / k.sum()


def smooth(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Channel-wise 'same' cross-correlation of an HxW or CxHxW map with a kernel."""
    image = np.asarray(image, dtype=DTYPE)
    kernel = np.asarray(kernel, dtype=DTYPE)
    if image.ndim not in (2, 3):
        raise ContractError(f"smooth: expected HxW or CxHxW map, got shape {image.shape}")
    k = kernel.shape[0]
    if kernel.ndim != 2 or kernel.shape[1] != k or k % 2 == 0:
        raise ContractError(f"smooth: kernel must be square with odd size, got {kernel.shape}")
    if k > image.shape[-1] or k > image.shape[-2]:
        raise ContractError(f"smooth: kernel {kernel.shape} larger than map {image.shape}")
    if k == 1:
        return image * kernel[0, 0]
    stack = image.reshape(-1, 1, *image.shape[-2:])
    out = _conv_np(stack, kernel[None, None])
    return out.reshape(image.shape)


def as_nodes(values: Iterable, requires_grad: bool = True) -> list[Node]:
    return [variable(v, requires_grad) for v in values]
