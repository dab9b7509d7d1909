"""Minimal dense-tensor numerics with reverse-mode differentiation.

The op set is fixed to what the detector and classifier networks need:
conv2d, maxpool2, dense, leaky_relu, sigmoid, softmax, elementwise
add/sub/mul, square, sqrt, log, sum, mean, concat, reshape. Every op
records enough state to replay the chain rule backwards; gradients of
a tensor used twice are accumulated by summation.
"""

import itertools
import struct

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "ComputationRecord", "backward", "record_for",
    "conv2d", "maxpool2", "dense", "leaky_relu", "sigmoid", "softmax",
    "add", "sub", "mul", "square", "sqrt", "log", "tsum", "tmean",
    "concat", "reshape", "sgd_step", "SGD",
    "save_checkpoint", "load_checkpoint", "CHECKPOINT_MAGIC",
]

_ids = itertools.count()

SQRT_CLAMP = 1e-8
LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes do not agree; message names the dimension."""


class Tensor:
    """Dense n-dimensional array with optional gradient tracking.

    `data` is a float32 (default) or float64 numpy array. Tensors produced
    by an op keep references to their inputs and a backward closure, which
    together form the computation record consumed by `backward`.
    """

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.node_id = next(_ids)
        self._op_kind = None    # leaf
        self._inputs = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def backward(self):
        backward(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, kind, inputs, backward_fn):
    # NaN poisons a sum and inf survives it, so one float64 reduction
    # checks finiteness without a full isfinite scan.
    if not np.isfinite(np.sum(data, dtype=np.float64)):
        raise FloatingPointError(f"non-finite values produced by op '{kind}'")
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op_kind = kind
        out._inputs = tuple(inputs)
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(t.data.dtype, copy=False)


def _unbroadcast(g, shape):
    """Reduce gradient `g` back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class ComputationRecord:
    """Topologically ordered list of executed ops reachable from one output."""

    def __init__(self, ops):
        self.ops = ops  # list of (kind, input node ids, output node id)

    def __len__(self):
        return len(self.ops)


def _reachable(root):
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.node_id in seen:
            continue
        seen[t.node_id] = t
        stack.extend(t._inputs)
    return seen


def record_for(root):
    """Materialize the computation record for everything feeding `root`."""
    nodes = sorted(_reachable(root).values(), key=lambda t: t.node_id)
    ops = [(t._op_kind, tuple(i.node_id for i in t._inputs), t.node_id)
           for t in nodes if t._op_kind is not None]
    return ComputationRecord(ops)


def backward(loss):
    """Fill grad buffers of every tracked tensor feeding the scalar `loss`."""
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    # Creation order is a topological order; walk it in reverse.
    nodes = sorted(_reachable(loss).values(), key=lambda t: t.node_id, reverse=True)
    loss.grad = np.ones_like(loss.data)
    for t in nodes:
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)


# ---------------------------------------------------------------------------
# elementwise and reduction ops

def add(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, "add", (a, b), back)


def sub(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))

    return _make(a.data - b.data, "sub", (a, b), back)


def mul(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)

    def back(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, "mul", (a, b), back)


def square(x):
    def back(g):
        _accumulate(x, g * (2.0 * x.data))

    return _make(x.data * x.data, "square", (x,), back)


def sqrt(x):
    # Backward clamps the input away from zero: the box-size loss takes
    # square roots of widths/heights that can approach 0.
    clamped = np.maximum(x.data, SQRT_CLAMP)
    out = np.sqrt(np.maximum(x.data, 0.0))

    def back(g):
        _accumulate(x, g * (0.5 / np.sqrt(clamped)))

    return _make(out, "sqrt", (x,), back)


def log(x):
    clamped = np.maximum(x.data, LOG_CLAMP)

    def back(g):
        _accumulate(x, g / clamped)

    return _make(np.log(clamped), "log", (x,), back)


def tsum(x):
    def back(g):
        _accumulate(x, np.full_like(x.data, float(g)))

    return _make(np.asarray(x.data.sum(), dtype=x.dtype), "sum", (x,), back)


def tmean(x):
    n = x.data.size

    def back(g):
        _accumulate(x, np.full_like(x.data, float(g) / n))

    return _make(np.asarray(x.data.mean(), dtype=x.dtype), "mean", (x,), back)


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 "concat", tuple(tensors), back)


def reshape(x, shape):
    old = x.data.shape

    def back(g):
        _accumulate(x, g.reshape(old))

    return _make(x.data.reshape(shape), "reshape", (x,), back)


# ---------------------------------------------------------------------------
# activations

def leaky_relu(x, slope=0.1):
    mask = np.where(x.data > 0, 1.0, slope).astype(x.dtype)

    def back(g):
        _accumulate(x, g * mask)

    return _make(x.data * mask, "leaky_relu", (x,), back)


def sigmoid(x):
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g):
        _accumulate(x, g * (out * (1.0 - out)))

    return _make(out, "sigmoid", (x,), back)


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        gy = g * out
        _accumulate(x, gy - out * gy.sum(axis=axis, keepdims=True))

    return _make(out, "softmax", (x,), back)


# ---------------------------------------------------------------------------
# linear algebra ops

def dense(x, weight, bias):
    """out = weight @ x + bias; accepts a vector [n] or a batch [N, n]."""
    m, n = weight.data.shape
    if x.data.shape[-1] != n:
        raise ShapeError(
            f"dense: input feature dim {x.data.shape[-1]} != weight columns {n}")
    if bias.data.shape != (m,):
        raise ShapeError(f"dense: bias shape {bias.data.shape} != ({m},)")
    out = x.data @ weight.data.T + bias.data

    def back(g):
        if x.data.ndim == 1:
            _accumulate(weight, np.outer(g, x.data))
            _accumulate(bias, g)
            _accumulate(x, g @ weight.data)
        else:
            _accumulate(weight, g.T @ x.data)
            _accumulate(bias, g.sum(axis=0))
            _accumulate(x, g @ weight.data)

    return _make(out, "dense", (x, weight, bias), back)


def conv2d(x, kernel, bias, stride=1, pad=0):
    """Cross-correlation of [C_in,H,W] or [N,C_in,H,W] with [C_out,C_in,k,k]."""
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    n, cin, h, w = xd.shape
    cout, kcin, kh, kw = kernel.data.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: kernel C_in {kcin} != input C_in {cin}")
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({cout},)")
    k = kh
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(
            f"conv2d: kernel size {k} exceeds padded input {h + 2 * pad}x{w + 2 * pad}")
    hout = (h + 2 * pad - k) // stride + 1
    wout = (w + 2 * pad - k) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]           # [n,cin,hout,wout,k,k]
    # One flat GEMM over all batch items and output positions.
    cols = np.ascontiguousarray(
        windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * hout * wout, cin * k * k)
    w2 = kernel.data.reshape(cout, cin * k * k)
    out = cols @ w2.T + bias.data                          # [n*hout*wout, cout]
    out = out.reshape(n, hout * wout, cout).transpose(0, 2, 1).reshape(n, cout, hout, wout)
    if single:
        out = out[0]

    def back(g):
        gd = g[None] if single else g
        gcols = np.ascontiguousarray(
            gd.reshape(n, cout, hout * wout).transpose(0, 2, 1)).reshape(-1, cout)
        _accumulate(kernel, (gcols.T @ cols).reshape(cout, cin, k, k))
        _accumulate(bias, gcols.sum(axis=0))
        if x.requires_grad:
            dcols = gcols @ w2                             # [n*L, cin*k*k]
            dcols = dcols.reshape(n, hout, wout, cin, k, k).transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * hout:stride,
                        j:j + stride * wout:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
            _accumulate(x, dx[0] if single else dx)

    return _make(out, "conv2d", (x, kernel, bias), back)


def maxpool2(x):
    """2x2 max pooling with stride 2 on [C,H,W] or [N,C,H,W]."""
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial dims must be even, got {h}x{w}")
    win = xd.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)                              # first index on ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    if single:
        out = out[0]

    def back(g):
        gd = g[None] if single else g
        dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=x.dtype)
        np.put_along_axis(dwin, arg[..., None], gd[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dx = dx.reshape(n, c, h, w)
        _accumulate(x, dx[0] if single else dx)

    return _make(out, "maxpool2", (x,), back)


# ---------------------------------------------------------------------------
# optimizer

def sgd_step(param, grad, velocity, lr, momentum):
    """One momentum-SGD update in place; returns the new velocity."""
    if lr <= 0:
        raise ValueError(f"sgd_step: lr must be > 0, got {lr}")
    velocity = momentum * velocity + grad
    param -= (lr * velocity).astype(param.dtype, copy=False)
    return velocity


class SGD:
    """Momentum SGD over a dict of named parameter Tensors."""

    def __init__(self, params, lr, momentum=0.9):
        if lr <= 0:
            raise ValueError(f"SGD: lr must be > 0, got {lr}")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self):
        for name in sorted(self.params):
            t = self.params[name]
            if t.grad is None:
                continue
            self.velocity[name] = sgd_step(
                t.data, t.grad, self.velocity[name], self.lr, self.momentum)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None


# ---------------------------------------------------------------------------
# parameter checkpoints

CHECKPOINT_MAGIC = b"SLVW"
CHECKPOINT_VERSION = 1


def save_checkpoint(params, path):
    """Write named tensors as little-endian binary: magic, version, entries."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = params[name].data if isinstance(params[name], Tensor) else params[name]
            raw = np.ascontiguousarray(data, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", raw.ndim))
            f.write(struct.pack(f"<{raw.ndim}I", *raw.shape))
            f.write(raw.tobytes())


def load_checkpoint(path, requires_grad=True):
    """Read a checkpoint back into a dict of named Tensors."""
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint (bad magic)")
        version, = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        count, = struct.unpack("<I", f.read(4))
        params = {}
        for _ in range(count):
            nlen, = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            rank, = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
            params[name] = Tensor(data.copy(), requires_grad=requires_grad)
    return params
