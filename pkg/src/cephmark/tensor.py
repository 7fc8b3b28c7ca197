"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Ops are recorded on the innermost active :class:`Graph` (entered with a
``with`` block).  Outside a graph every op is a plain numpy computation, so
inference and finite-difference evaluation never pay for bookkeeping.

    with Graph() as g:
        loss = (conv2d(x, w, b, padding=1) * 2.0).sum()
    grads = g.backward(loss)
"""
from __future__ import annotations

import contextlib
import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEBUG = os.environ.get("CEPHMARK_DEBUG", "") not in ("", "0")

_local = threading.local()
_faults: set[str] = set()


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    """n-d float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_graph")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._graph: Graph | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.node_id = None
        t._graph = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def backward(self) -> dict[int, np.ndarray]:
        if self._graph is None:
            raise GraphError("tensor was not produced inside a recording Graph")
        return self._graph.backward(self)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Tape of recorded ops; insertion order is a valid topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, op: str, inputs: Sequence[Tensor], out: Tensor, backward_fn) -> Tensor:
        out.requires_grad = True
        out.node_id = len(self.nodes)
        out._graph = self
        self.nodes.append(_Node(op, tuple(inputs), out, backward_fn))
        return out

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Sweep the tape in reverse from ``loss``.

        Leaf tensors with ``requires_grad`` get their ``grad`` buffer filled
        (accumulating onto any existing buffer).  Returns the gradient of every
        tensor reached, keyed by ``id(tensor)``.
        """
        if loss.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        nid = loss.node_id
        if loss._graph is not self or nid is None or nid >= len(self.nodes) \
                or self.nodes[nid].output is not loss:
            raise GraphError("loss is not a node of this graph (dangling node)")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes[: nid + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if inp._graph is None:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        return grads


def _stack() -> list[Graph]:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def active_graph() -> Graph | None:
    st = _stack()
    return st[-1] if st else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording on this thread."""
    saved = _local.__dict__.get("stack")
    _local.stack = []
    try:
        yield
    finally:
        _local.stack = saved if saved is not None else []


@contextlib.contextmanager
def record_patterns():
    """Collect every ReLU mask and max-pool argmax computed on this thread.

    Two evaluations with equal pattern lists lie in the same linear piece of
    a ReLU/max-pool network.
    """
    saved = _local.__dict__.get("patterns")
    _local.patterns = log = []
    try:
        yield log
    finally:
        _local.patterns = saved


def _log_pattern(arr: np.ndarray) -> None:
    log = _local.__dict__.get("patterns")
    if log is not None:
        log.append(arr)


@contextlib.contextmanager
def inject_fault(name: str):
    """Test hook: deliberately corrupt a backward rule (``"conv2d_sign"``)."""
    _faults.add(name)
    try:
        yield
    finally:
        _faults.discard(name)


def apply_op(op: str, inputs: Sequence[Tensor], out: np.ndarray,
             backward_fn: Callable[[np.ndarray], Iterable[np.ndarray | None]]) -> Tensor:
    """Wrap ``out`` and record it if a graph is active and any input needs grad."""
    t = Tensor._wrap(out)
    if DEBUG and not np.all(np.isfinite(t.data)):
        if all(np.all(np.isfinite(i.data)) for i in inputs):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    g = active_graph()
    if g is not None and any(i.requires_grad for i in inputs):
        g.record(op, inputs, t, backward_fn)
    return t


def _as_tensor(x, shape=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None and arr.shape == ():
        arr = np.full(shape, float(arr))
    return Tensor._wrap(arr)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.shape)
    _check_same(a, b, "add")
    return apply_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.shape)
    _check_same(a, b, "sub")
    return apply_op("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)
        return apply_op("scale", (a,), a.data * c, lambda g: (g * c,))
    b = _as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return apply_op("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    mask = x.data > 0
    _log_pattern(mask)
    return apply_op("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return apply_op("sum", (x,), np.array(x.data.sum()),
                    lambda g: (np.full(shape, np.asarray(g).item()),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return apply_op("mean", (x,), np.array(x.data.mean()),
                    lambda g: (np.full(shape, np.asarray(g).item() / n),))


# convolution -----------------------------------------------------------------

def _conv_out(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,Cin,H,W]`` with ``weight[Cout,Cin,kh,kw]``, zero padded."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = weight.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has Cin={cin} but kernel has Cin={kcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match Cout={cout}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input "
                         f"{h + 2 * padding}x{w + 2 * padding}")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: zero-sized output {ho}x{wo}")

    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # column matrix laid out (Cin, kh, kw, N, Ho, Wo) so both GEMMs see contiguous operands
    cols = np.empty((cin, kh, kw, n, ho, wo))
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
    cols2 = cols.reshape(cin * kh * kw, n * ho * wo)
    w2 = weight.data.reshape(cout, -1)
    out = (w2 @ cols2).reshape(cout, n, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = out.transpose(1, 0, 2, 3)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gw = (g2 @ cols2.T).reshape(weight.shape)
        gb = g2.sum(axis=1) if bias is not None else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(cin, kh, kw, n, ho, wo)
            gxt = np.zeros((cin, n, h + 2 * p, w + 2 * p))
            for i in range(kh):
                for j in range(kw):
                    gxt[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += gcols[:, i, j]
            gx = gxt.transpose(1, 0, 2, 3)
            if p:
                gx = gx[:, :, p:p + h, p:p + w]
        if "conv2d_sign" in _faults:
            gw = -gw
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return apply_op("conv2d", inputs, out, backward)


# pooling / resampling -------------------------------------------------------

def maxpool2d(x: Tensor, size: int) -> tuple[Tensor, np.ndarray]:
    """Non-overlapping max pooling.

    Returns the pooled tensor and, per output cell, the flat ``row * W + col``
    index of the winning input pixel (first maximum in row-major window order).
    """
    n, c, h, w = x.shape
    if size < 1 or h % size or w % size:
        raise ShapeError(f"maxpool2d: H={h}, W={w} not divisible by size={size}")
    ho, wo = h // size, w // size
    win = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, ho, wo, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * size + arg // size
    cols = np.arange(wo)[None, :] * size + arg % size
    flat = rows * w + cols
    _log_pattern(flat)

    def backward(g):
        gx = np.zeros((n, c, h * w))
        np.put_along_axis(gx, flat.reshape(n, c, -1), g.reshape(n, c, -1), axis=-1)
        return (gx.reshape(n, c, h, w),)

    return apply_op("maxpool2d", (x,), out, backward), flat


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear-interpolation weights ``(n_out, n_in)``, align-corners-false.

    Output sample ``i`` reads source coordinate ``(i + 0.5) * n_in / n_out - 0.5``,
    clamped into ``[0, n_in - 1]``.
    """
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def upsample2x(x: Tensor, mode: str = "nearest") -> Tensor:
    n, c, h, w = x.shape
    if mode == "nearest":
        out = x.data.repeat(2, axis=2).repeat(2, axis=3)
        return apply_op("upsample_nearest", (x,), out,
                        lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))
    if mode != "bilinear":
        raise ValueError(f"unknown upsample mode {mode!r}")
    mh, mw = interp_matrix(h, 2 * h), interp_matrix(w, 2 * w)
    out = np.einsum("ih,nchw,jw->ncij", mh, x.data, mw, optimize=True)
    return apply_op("upsample_bilinear", (x,), out,
                    lambda g: (np.einsum("ih,ncij,jw->nchw", mh, g, mw, optimize=True),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels expects 4-d tensors, got {a.shape} and {b.shape}")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"concat_channels: N/H/W mismatch {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    return apply_op("concat", (a, b), out, lambda g: (g[:, :ca], g[:, ca:]))


# checking ----------------------------------------------------------------------

def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-4) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``, one element at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.data, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.zeros(flat.size)

    def ev(arr):
        with no_grad():
            v = f(Tensor._wrap(arr.reshape(base.shape)))
        return v.item() if isinstance(v, Tensor) else float(v)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = ev(flat)
        flat[i] = orig - h
        fm = ev(flat)
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return Tensor._wrap(grad.reshape(base.shape))
