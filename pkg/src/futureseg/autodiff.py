"""Rank-4 tensor core with reverse-mode automatic differentiation.

Every value is a dense NCHW float tensor. Operations record a computation
graph as they run; ``backward`` replays the graph in reverse topological
order and returns the gradient of a scalar loss with respect to every
participating leaf. Training runs in float32; wrap gradient checks in
``double_precision()`` to build float64 tensors end to end.

Any operation that produces NaN or Inf raises ``NonFiniteError`` instead of
propagating the value silently.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand dimensions violate an operation's contract."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class GraphError(ValueError):
    """The recorded computation graph cannot satisfy the request."""


class _ThreadState(threading.local):
    # Modes are per thread: graph recording belongs to one thread, and
    # concurrent inference threads must not flip each other's flags.
    def __init__(self):
        self.dtype = np.float32
        self.grad_enabled = True


_STATE = _ThreadState()

_SIGMOID = "sigmoid"
_TANH = "tanh"
_RELU = "relu"


@contextlib.contextmanager
def double_precision():
    """Create float64 tensors inside the block (gradient-check mode)."""
    prev = _STATE.dtype
    _STATE.dtype = np.float64
    try:
        yield
    finally:
        _STATE.dtype = prev


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block (inference mode)."""
    prev = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


def default_dtype():
    return _STATE.dtype


class Tensor:
    """A rank-4 NCHW float array plus the graph edge that produced it.

    ``data`` is immutable by convention once the tensor participates in a
    recorded graph; parameter updates replace ``data`` wholesale under
    exclusive access. Hashing is by identity, never by value.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_STATE.dtype)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank-4 NCHW, got rank {arr.ndim}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor constructed from non-finite data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of {self.data.size} elements")
        return float(self.data.reshape(()))

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self):
        return f"Tensor(dims={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"


GradientSet = dict
"""Mapping from leaf parameter Tensor to its gradient Tensor of equal dims."""


def _make(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    if _STATE.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # Inverse of numpy broadcasting: sum over axes that were expanded.
    if grad.shape == shape:
        return grad
    axes = tuple(ax for ax, n in enumerate(shape) if n == 1 and grad.shape[ax] != 1)
    return grad.sum(axis=axes, keepdims=True)


def tensor_new(dims: Sequence[int], init: str = "zeros", value: float = 0.0,
               seed: int | None = None, requires_grad: bool = False) -> Tensor:
    """Create an NCHW tensor.

    init is one of "zeros", "constant" (fill with ``value``), "uniform"
    (uniform in (-value, value)), or "normal" (mean 0, std ``value``).
    Random inits require an explicit integer seed and are bit-reproducible
    for equal (dims, init, value, seed).
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4 or any(d < 0 for d in dims):
        raise ShapeError(f"dims must be 4 non-negative extents, got {dims}")
    total = 1
    for d in dims:
        total *= d
    if total > np.iinfo(np.intp).max:
        raise ShapeError(f"element count {total} exceeds addressable size")
    if init == "zeros":
        data = np.zeros(dims, dtype=_STATE.dtype)
    elif init == "constant":
        data = np.full(dims, value, dtype=_STATE.dtype)
    elif init in ("uniform", "normal"):
        if seed is None:
            raise ValueError(f"{init} init requires an explicit seed")
        rng = np.random.Generator(np.random.PCG64(int(seed)))
        if init == "uniform":
            data = rng.uniform(-value, value, size=dims).astype(_STATE.dtype)
        else:
            data = rng.normal(0.0, value, size=dims).astype(_STATE.dtype)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Pointwise a + b; operands may broadcast under numpy NCHW rules."""
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: incompatible dims {a.dims} vs {b.dims}") from exc

    def backward(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Pointwise Hadamard product; operands may broadcast."""
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"hadamard: incompatible dims {a.dims} vs {b.dims}") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), backward, "hadamard")


hadamard = mul


def elementwise(kind: str, a: Tensor, b: Tensor) -> Tensor:
    """Strict same-dims pointwise op: kind is "add" or "hadamard"."""
    if a.dims != b.dims:
        raise ShapeError(f"elementwise {kind}: dims differ {a.dims} vs {b.dims}")
    if kind == "add":
        return add(a, b)
    if kind == "hadamard":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def sigmoid(x: Tensor) -> Tensor:
    # 0.5*(1 + tanh(x/2)) is the overflow-safe form of 1/(1+e^-x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), backward, "tanh")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0)

    def backward(g):
        return (g * (xd > 0),)

    return _make(out, (x,), backward, "relu")


def activation(kind: str, x: Tensor) -> Tensor:
    """Pointwise nonlinearity: kind is "sigmoid", "tanh", or "relu"."""
    if kind == _SIGMOID:
        return sigmoid(x)
    if kind == _TANH:
        return tanh(x)
    if kind == _RELU:
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


def _conv_out_extent(size: int, k: int, stride: int, pad: int, dil: int) -> int:
    return (size + 2 * pad - dil * (k - 1) - 1) // stride + 1


def _zero_pad(x: np.ndarray, pad: int) -> np.ndarray:
    # np.pad has heavy per-call overhead on small arrays
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = x
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int, dil: int,
            oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = x.shape
    if pad:
        x = _zero_pad(x, pad)
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2 * dil, s3 * dil, s2 * stride, s3 * stride),
        writeable=False)
    # the reshape of the transposed view materializes the patch matrix
    return view.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)


def _col2im(col: np.ndarray, xshape: tuple, kh: int, kw: int, stride: int,
            pad: int, dil: int, oh: int, ow: int) -> np.ndarray:
    n, c, h, w = xshape
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=col.dtype)
    col = col.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        ih = i * dil
        for j in range(kw):
            jw = j * dil
            img[:, :, ih:ih + stride * oh:stride, jw:jw + stride * ow:stride] += col[:, :, i, j]
    if pad:
        return img[:, :, pad:pad + h, pad:pad + w]
    return img


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2D cross-correlation of x[N,Cin,H,W] with w[Cout,Cin,kh,kw].

    Zero padding; no kernel flip. Output extents follow
    floor((H + 2p - d*(k-1) - 1)/s) + 1. ``bias`` is one value per output
    channel, supplied as a (1,Cout,1,1) tensor. The im2col buffer is
    rebuilt during backward rather than cached, trading a second unfold
    for graph memory.
    """
    n, cin, h, wd = x.data.shape
    cout, wcin, kh, kw = w.data.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {wcin}")
    if kh < 1 or kw < 1 or stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError("conv2d: kernel/stride/dilation must be >= 1, padding >= 0")
    if bias is not None and bias.data.shape != (1, cout, 1, 1):
        raise ShapeError(f"conv2d: bias dims {bias.dims} != (1,{cout},1,1)")
    oh = _conv_out_extent(h, kh, stride, padding, dilation)
    ow = _conv_out_extent(wd, kw, stride, padding, dilation)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: non-positive output extent {oh}x{ow}")

    wmat = w.data.reshape(cout, -1)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        out = np.matmul(wmat, x.data.reshape(n, cin, h * wd)).reshape(n, cout, h, wd)
    else:
        col = _im2col(x.data, kh, kw, stride, padding, dilation, oh, ow)
        out = (col @ wmat.T).reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data

    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        gx = gw = gb = None
        if pointwise:
            gm = g.reshape(n, cout, oh * ow)
            if w.requires_grad:
                gw = np.matmul(gm, x.data.reshape(n, cin, oh * ow).transpose(0, 2, 1)) \
                    .sum(axis=0).reshape(w.data.shape)
            if x.requires_grad:
                gx = np.matmul(wmat.T, gm).reshape(x.data.shape)
        else:
            gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
            if w.requires_grad or x.requires_grad:
                # rebuild the unfold rather than caching it: cheaper in memory
                bcol = _im2col(x.data, kh, kw, stride, padding, dilation, oh, ow)
                if w.requires_grad:
                    gw = (gmat.T @ bcol).reshape(w.data.shape)
                if x.requires_grad:
                    gcol = gmat @ wmat
                    gx = _col2im(gcol, x.data.shape, kh, kw, stride, padding,
                                 dilation, oh, ow)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1)
        if bias is None:
            return gx, gw
        return gx, gw, gb

    return _make(out, parents, backward, "conv2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel into a factor x factor block."""
    f = int(factor)
    if f < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    if f == 1:
        data = x.data.copy()
    else:
        data = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def backward(g):
        n, c, h, w = x.data.shape
        if f == 1:
            return (g,)
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _make(data, (x,), backward, "upsample_nearest")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack b's channels after a's; batch and spatial dims must match."""
    na, ca, ha, wa = a.data.shape
    nb, cb, hb, wb = b.data.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.dims} vs {b.dims}")
    data = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        ga = g[:, :ca] if a.requires_grad else None
        gb = g[:, ca:] if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), backward, "concat_channels")


def concat_batch(a: Tensor, b: Tensor) -> Tensor:
    """Stack b's batch entries after a's; trailing dims must match."""
    if a.data.shape[1:] != b.data.shape[1:]:
        raise ShapeError(f"concat_batch: trailing dims differ {a.dims} vs {b.dims}")
    na = a.data.shape[0]
    data = np.concatenate([a.data, b.data], axis=0)

    def backward(g):
        ga = g[:na] if a.requires_grad else None
        gb = g[na:] if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), backward, "concat_batch")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels [start, stop) of x as a new tensor."""
    c = x.data.shape[1]
    if not (0 <= start <= stop <= c):
        raise ShapeError(f"channel slice [{start},{stop}) out of range for C={c}")
    data = np.ascontiguousarray(x.data[:, start:stop])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _make(data, (x,), backward, "slice_channels")


def slice_batch(x: Tensor, start: int, stop: int) -> Tensor:
    """Batch entries [start, stop) of x as a new tensor."""
    n = x.data.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"batch slice [{start},{stop}) out of range for N={n}")
    data = np.ascontiguousarray(x.data[start:stop])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _make(data, (x,), backward, "slice_batch")


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element, as a (1,1,1,1) scalar tensor."""
    data = np.asarray(x.data.sum(), dtype=x.data.dtype).reshape(1, 1, 1, 1)

    def backward(g):
        return (np.full(x.data.shape, g.flat[0], dtype=g.dtype),)

    return _make(data, (x,), backward, "sum_all")


def softmax_cross_entropy_mean(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over all pixels of -log softmax(logits)[target].

    logits are [N,K,H,W]; targets are integer class maps of shape (H,W) or
    (N,H,W) with every index in [0,K). Stabilized by per-pixel max
    subtraction.
    """
    t = np.asarray(targets)
    if t.ndim == 2:
        t = t[None]
    n, k, h, w = logits.data.shape
    if t.shape != (n, h, w):
        raise ShapeError(f"targets shape {t.shape} != {(n, h, w)}")
    if not np.issubdtype(t.dtype, np.integer):
        raise ShapeError(f"targets must be integer class indices, got {t.dtype}")
    if t.size == 0:
        raise ShapeError("empty target map")
    if t.min() < 0 or t.max() >= k:
        raise IndexError(f"class index out of range [0,{k})")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    idx = t[:, None].astype(np.intp)
    logp_t = np.take_along_axis(z - zmax, idx, axis=1) - np.log(sez)
    loss = np.asarray(-logp_t.mean(), dtype=z.dtype).reshape(1, 1, 1, 1)

    def backward(g):
        grad = ez / sez
        np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=1) - 1.0, axis=1)
        grad *= g.flat[0] / t.size
        return (grad,)

    return _make(loss, (logits,), backward, "softmax_cross_entropy_mean")


def backward(loss: Tensor) -> GradientSet:
    """Reverse-mode gradients of a recorded scalar.

    Returns a mapping from every requires-grad leaf tensor reachable from
    ``loss`` to its gradient. Accumulation follows a fixed reverse
    topological order, so repeated runs are bit-identical.
    """
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got dims {loss.dims}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))

    acc: dict[int, np.ndarray] = {id(loss): np.ones((1, 1, 1, 1), dtype=loss.data.dtype)}
    for node in reversed(topo):
        g = acc.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            cur = acc.get(id(parent))
            acc[id(parent)] = pg if cur is None else cur + pg

    grads: GradientSet = {}
    for node in topo:
        if node.requires_grad and not node._parents:
            g = acc.get(id(node))
            if g is not None:
                grads[node] = Tensor(g)
    return grads


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a pure scalar evaluator at x.

    Independent of the recorded graph: evaluates f twice per element on a
    private copy of x.
    """
    probe = Tensor(x.data.copy())
    flat = probe.data.reshape(-1)
    grad = np.zeros_like(flat)

    def evaluate() -> float:
        with no_grad():
            result = f(probe)
        if isinstance(result, Tensor):
            return result.item()
        return float(result)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = evaluate()
        flat[i] = orig - eps
        fm = evaluate()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * eps)
    return Tensor(grad.reshape(x.data.shape))
