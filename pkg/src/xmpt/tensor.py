"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation appends a :class:`Node` that remembers its
inputs and a closure mapping the output gradient to input gradients. Node ids
come from a global counter, so creation order is a valid topological order and
:func:`backward` only has to sort the nodes reachable from the loss.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an op."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        dims = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {dims}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op


class GraphError(RuntimeError):
    pass


_ids = itertools.count()
_state = threading.local()
_corrupted: set[str] = set()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def record_relu_masks():
    """Collect the activation pattern of every relu evaluated in the block.

    Used by the gradient checker to detect perturbations that cross a kink.
    """
    masks: list[np.ndarray] = []
    prev = getattr(_state, "relu_masks", None)
    _state.relu_masks = masks
    try:
        yield masks
    finally:
        _state.relu_masks = prev


@contextlib.contextmanager
def corrupt_gradient(kind: str, factor: float = 1.1):
    """Test hook: scale the backward pass of one op kind by ``factor``."""
    _corrupted.add(kind)
    prev = getattr(_state, "corrupt_factor", None)
    _state.corrupt_factor = factor
    try:
        yield
    finally:
        _corrupted.discard(kind)
        _state.corrupt_factor = prev


class Node:
    __slots__ = ("id", "kind", "inputs", "backward_fn")

    def __init__(self, kind: str, inputs: tuple, backward_fn: Callable):
        self.id = next(_ids)
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.id}, {self.kind!r})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.asarray(arr, dtype=np.float64)
        t.requires_grad = False
        t.grad = None
        t.node = None
        return t

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kind: str, data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor._wrap(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        if kind in _corrupted:
            factor = _state.corrupt_factor
            inner = backward_fn

            def backward_fn(g, inner=inner):
                return tuple(None if gi is None else gi * factor for gi in inner(g))

        out.requires_grad = True
        out.node = Node(kind, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    masks = getattr(_state, "relu_masks", None)
    if masks is not None:
        masks.append(mask)
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", y, (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    y = x.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make("mean", y, (x,), back)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, detail=f"target {tuple(shape)}") from None
    return _make("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def index(x, idx) -> Tensor:
    """Basic (slice/integer) indexing."""
    x = as_tensor(x)
    y = x.data[idx]

    def back(g):
        gx = np.zeros_like(x.data)
        gx[idx] += g
        return (gx,)

    return _make("index", np.array(y), (x,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat", detail="no inputs")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError("concat", *(t.shape for t in ts), detail=f"axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    y = np.concatenate([t.data for t in ts], axis=ax)
    return _make("concat", y, ts, lambda g: tuple(np.split(g, splits, axis=ax)))


def gather_rows(x, idx) -> Tensor:
    """Select rows ``x[idx]`` along the first axis; repeated indices accumulate."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows", x.shape, idx.shape, detail="index must be 1-D")
    if idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0]):
        raise ShapeError("gather_rows", x.shape, idx.shape, detail="index out of range")

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make("gather_rows", x.data[idx], (x,), back)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), back)


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NHWC input and (kh, kw, cin, cout) weights, via im2col."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, h, wd, c = x.shape
    kh, kw, _, cout = w.shape
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, : s * ho : s, : s * wo : s]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    wmat = w.data.reshape(kh * kw * c, cout)
    y = (cols @ wmat).reshape(n, ho, wo, cout)

    def back(g):
        g2 = g.reshape(-1, cout)
        gx = gw = None
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(w.shape)
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    tap = (g2 @ w.data[i, j].T).reshape(n, ho, wo, c)
                    gxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += tap
            gx = gxp[:, p : p + h, p : p + wd, :] if p else gxp
        return gx, gw

    return _make("conv2d", y, (x, w), back)


def _bilinear_matrix(n: int, factor: int) -> np.ndarray:
    # half-pixel centers, edge-clamped (align_corners=False)
    m = np.zeros((n * factor, n))
    src = (np.arange(n * factor) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    rows = np.arange(n * factor)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def upsample_bilinear(x, factor: int = 2) -> Tensor:
    """Separable bilinear upsampling of an NHWC tensor by an integer factor."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("upsample_bilinear", x.shape, detail="expected NHWC")
    mh = _bilinear_matrix(x.shape[1], factor)
    mw = _bilinear_matrix(x.shape[2], factor)
    y = np.einsum("ph,nhwc->npwc", mh, x.data, optimize=True)
    y = np.einsum("qw,npwc->npqc", mw, y, optimize=True)

    def back(g):
        gx = np.einsum("qw,npqc->npwc", mw, g, optimize=True)
        return (np.einsum("ph,npwc->nhwc", mh, gx, optimize=True),)

    return _make("upsample_bilinear", y, (x,), back)


def bilinear_weights(shape_hw: tuple, coords: np.ndarray):
    """Corner indices and weights for sampling at continuous (u, v) pixel coordinates.

    Pixel (i, j) covers [j, j+1) x [i, i+1); its value sits at the center.
    Samples outside the center grid clamp to the border.
    """
    h, w = shape_hw
    coords = np.asarray(coords, dtype=np.float64)
    x = np.clip(coords[:, 0] - 0.5, 0.0, w - 1)
    y = np.clip(coords[:, 1] - 0.5, 0.0, h - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    idx = (y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1)
    wts = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    return idx, wts


def bilinear_sample(x, coords) -> Tensor:
    """Sample an (H, W, C) map at M continuous (u, v) coordinates -> (M, C).

    Differentiable with respect to the map only.
    """
    x = as_tensor(x)
    coords = np.asarray(coords, dtype=np.float64)
    if x.ndim != 3 or coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError("bilinear_sample", x.shape, coords.shape)
    h, w, c = x.shape
    flat = x.data.reshape(h * w, c)
    idx, wts = bilinear_weights((h, w), coords)
    y = np.zeros((coords.shape[0], c))
    for i, wt in zip(idx, wts):
        y += wt[:, None] * flat[i]

    def back(g):
        gx = np.zeros((h * w, c))
        for i, wt in zip(idx, wts):
            np.add.at(gx, i, wt[:, None] * g)
        return (gx.reshape(x.shape),)

    return _make("bilinear_sample", y, (x,), back)


# ---------------------------------------------------------------------------
# normalization


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Scale each vector along the last axis to unit length."""
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def back(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm,)

    return _make("l2_normalize", y, (x,), back)


def softmax(x) -> Tensor:
    x = as_tensor(x)
    z = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make("softmax", y, (x,), back)


def logsumexp(x, axis: int = -1) -> Tensor:
    """Row-max-stabilized log-sum-exp, composed from primitive ops."""
    x = as_tensor(x)
    m = Tensor._wrap(x.data.max(axis=axis, keepdims=True))
    s = log(sum(exp(sub(x, m)), axis=axis, keepdims=True))
    return reshape(add(s, m), np.squeeze(m.data, axis=axis).shape)


OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "conv2d": conv2d,
    "upsample_bilinear": upsample_bilinear,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sum": sum,
    "mean": mean,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "gather_rows": gather_rows,
    "l2_normalize": l2_normalize,
    "softmax": softmax,
    "bilinear_sample": bilinear_sample,
    "reshape": reshape,
    "transpose": transpose,
}


def forward_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# backward


class Graph:
    """The nodes reachable from an output, in creation (topological) order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        seen: dict[int, Node] = {}
        stack = [out.node] if out.node is not None else []
        while stack:
            node = stack.pop()
            if node.id in seen:
                continue
            seen[node.id] = node
            for t in node.inputs:
                if t.node is not None and t.node.id not in seen:
                    stack.append(t.node)
        return cls(sorted(seen.values(), key=lambda n: n.id))

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from a scalar loss."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise GraphError("loss is detached from any graph (no node)")
    graph = Graph.from_output(loss)
    grads: dict[int, np.ndarray] = {loss.node.id: np.ones_like(loss.data)}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.node is not None:
                key = t.node.id
                grads[key] = grads[key] + gi if key in grads else gi
            else:
                key = id(t)
                if key in leaves:
                    leaves[key] = (t, leaves[key][1] + gi)
                else:
                    leaves[key] = (t, gi)
    for t, g in leaves.values():
        g = np.asarray(g, dtype=np.float64).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
