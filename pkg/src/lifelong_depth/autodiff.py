"""Minimal reverse-mode differentiation over float64 arrays.

Operations append to the tape of the active :class:`Graph` (thread-local), so
the tape is topologically ordered by construction and backward is a single
reverse sweep.  Outside a graph the same functions just compute values.

Binary elementwise ops accept operands of identical shape, or one operand of
size 1 (a scalar).  There is no general broadcasting.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping

import numpy as np

EXP_CLAMP = 30.0

_state = threading.local()


class AutodiffError(Exception):
    """Raised for malformed graphs, bad shapes or misuse of forward/backward."""


class ShapeError(AutodiffError):
    def __init__(self, node: str, message: str):
        self.node = node
        super().__init__(f"{node}: {message}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise AutodiffError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __neg__(self):
        return negate(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# graph / tape


class Graph:
    """A differentiable program: a builder function plus named parameters.

    ``build(params, inputs)`` receives two dicts of :class:`Tensor` and returns
    a Tensor or a dict of Tensors.  The primitive applications of the most
    recent :func:`forward` are kept in ``nodes`` in creation order.
    """

    def __init__(self, build: Callable | None = None, params: Mapping[str, np.ndarray] | None = None):
        self.build = build
        self.params: dict[str, Tensor] = {
            k: parameter(v, name=k) for k, v in (params or {}).items()
        }
        self.nodes: list[Tensor] = []
        self.gradients: dict[str, np.ndarray] = {}
        self._recording = False
        self._forward_done = False

    def __enter__(self) -> Graph:
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        self.nodes = []
        self.gradients = {}
        self._recording = True
        self._forward_done = True
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()
        self._recording = False

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf on the tape.

        Leaves listed in ``params`` that the loss does not reach get a zero
        gradient.
        """
        if not self._forward_done:
            raise AutodiffError("backward called before forward")
        if loss.data.size != 1:
            raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
        if params is not None:
            for p in params:
                p.grad = np.zeros_like(p.data)
        if not loss.requires_grad:
            return
        if not self.nodes or not any(n is loss for n in reversed(self.nodes)):
            raise AutodiffError("loss was not produced by a forward pass on this graph")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    # leaf
                    if parent.grad is None:
                        parent.grad = pg.copy() if pg.base is not None else pg
                    else:
                        parent.grad = parent.grad + pg
                else:
                    key = id(parent)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg


def _active_graph() -> Graph | None:
    stack = getattr(_state, "stack", None)
    if stack:
        g = stack[-1]
        return g if g._recording else None
    return None


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward, label: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = label
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    graph = _active_graph()
    if graph is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        graph.record(out)
    return out


def forward(graph: Graph, inputs: Mapping[str, np.ndarray] | None = None):
    """Run the graph's builder on ``inputs``, recording a fresh tape."""
    if graph.build is None:
        raise AutodiffError("graph has no builder")
    tensors = {}
    for k, v in (inputs or {}).items():
        arr = np.asarray(v, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise AutodiffError(f"input {k!r} contains non-finite values")
        tensors[k] = Tensor(arr, name=k)
    for p in graph.params.values():
        p.grad = None
    with graph:
        out = graph.build(graph.params, tensors)
    return out


def backward(graph: Graph, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of ``loss`` for every named parameter of ``graph``."""
    for p in graph.params.values():
        p.grad = None
    graph.backward(loss, graph.params.values())
    graph.gradients = {k: p.grad for k, p in graph.params.items()}
    return graph.gradients


def _scalar_output(out) -> Tensor:
    if isinstance(out, Mapping):
        if "loss" not in out:
            raise AutodiffError("graph output dict has no 'loss' entry")
        out = out["loss"]
    return out


def finite_diff_check(graph: Graph, inputs: Mapping[str, np.ndarray] | None = None, epsilon: float = 1e-6) -> float:
    """Max over parameter entries of |analytic - central difference| / max(1, |central difference|)."""
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    loss = _scalar_output(forward(graph, inputs))
    analytic = {k: g.copy() for k, g in backward(graph, loss).items()}
    worst = 0.0
    for name, p in graph.params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = _scalar_output(forward(graph, inputs)).item()
            flat[i] = orig - epsilon
            down = _scalar_output(forward(graph, inputs)).item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            err = abs(analytic[name].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# elementwise


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(op, f"operand shapes {a.shape} and {b.shape} differ")
    return a, b


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def back(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _node(a.data + b.data, (a, b), back, "add")


def subtract(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "subtract")

    def back(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _node(a.data - b.data, (a, b), back, "subtract")


def multiply(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "multiply")

    def back(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return _node(a.data * b.data, (a, b), back, "multiply")


def negate(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "negate")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * sign,), "absolute")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _node(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def exp(a) -> Tensor:
    """e**a with the argument saturated to [-30, 30]; zero gradient when saturated."""
    a = as_tensor(a)
    inside = np.abs(a.data) <= EXP_CLAMP
    out = np.exp(np.clip(a.data, -EXP_CLAMP, EXP_CLAMP))
    return _node(out, (a,), lambda g: (g * out * inside,), "exp")


# ---------------------------------------------------------------------------
# reductions


def _axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _axes(axis, a.data.ndim)
    out = a.data.sum(axis=axes)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def back(g):
        return (np.broadcast_to(g.reshape(kept), a.shape),)

    return _node(np.asarray(out), (a,), back, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.data.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def back(g):
        return (np.broadcast_to(g.reshape(kept) / count, a.shape),)

    return _node(np.asarray(out), (a,), back, "mean")


# ---------------------------------------------------------------------------
# layers


def dense(x, weight, bias) -> Tensor:
    """Affine map ``x @ weight + bias`` for x of shape (N, in)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError("dense", f"input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError("dense", f"bias {bias.shape} does not match weight {weight.shape}")

    def back(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _node(x.data @ weight.data + bias.data, (x, weight, bias), back, "dense")


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, (out, in, kh, kw) weight."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError("conv2d", f"input has {c} channels, weight expects {ci}")
    if bias.shape != (o,):
        raise ShapeError("conv2d", f"bias {bias.shape} does not match {o} output channels")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", f"input {x.shape} too small for kernel {kh}x{kw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    # columns: (c*kh*kw, n*ho*wo)
    cols = windows.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    wmat = weight.data.reshape(o, c * kh * kw)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3) + bias.data[None, :, None, None]

    def back(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gw = (gmat @ cols.T).reshape(weight.shape)
        gcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
        gxp = np.zeros((n, c) + xp.shape[2:])
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                    gcols[:, i, j].transpose(1, 0, 2, 3)
                )
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _node(out, (x, weight, bias), back, "conv2d")


def avg_pool2d(x, kernel: int) -> Tensor:
    """Non-overlapping average pooling with square window ``kernel``."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ShapeError("avg_pool2d", f"spatial size {h}x{w} not divisible by {kernel}")
    out = x.data.reshape(n, c, h // kernel, kernel, w // kernel, kernel).mean(axis=(3, 5))

    def back(g):
        up = np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3)
        return (up / (kernel * kernel),)

    return _node(out, (x,), back, "avg_pool2d")


def upsample_nearest(x, factor: int) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("upsample_nearest", f"expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if factor == 1:
        return x
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def back(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _node(out, (x,), back, "upsample_nearest")


def concat(tensors: list, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            a != b for k, (a, b) in enumerate(zip(t.shape, ref)) if k != axis % len(ref)
        ):
            raise ShapeError("concat", f"shapes {ref} and {t.shape} disagree off axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat")


# ---------------------------------------------------------------------------
# composites (built only from the primitives above)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Hard clamp to [lo, hi] written with relu; zero gradient outside."""
    a = as_tensor(a)
    return a - relu(a - hi) + relu(lo - a)


def unit_squash(a) -> Tensor:
    """Monotone map R -> (0, 1): 0.5 + 0.5 * (exp(-relu(-a)) - exp(-relu(a)))."""
    a = as_tensor(a)
    return 0.5 + 0.5 * (exp(-relu(-a)) - exp(-relu(a)))
