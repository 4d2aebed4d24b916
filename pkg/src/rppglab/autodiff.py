"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation that touches a value with requires_grad=True records a node
holding its inputs and a vector-Jacobian closure. The graph is built
dynamically per forward pass; backward() walks it in reverse topological
order exactly once and accumulates gradients additively into the leaves,
then the graph is garbage-collected with the values.

Broadcasting follows trailing-dimension alignment with size-1 expansion
only; anything else is rejected with both shapes in the message.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to the operation's rules."""


class NonFiniteError(ValueError):
    """A value contains NaN or Inf where finite data is required."""


# Opt-in forward finiteness checking on every op output (slow; tests use it).
STRICT_FINITE = False


class _Node:
    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op, inputs, vjp):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp


class DiffValue:
    """A float64 array plus optional gradient and producing-op record."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("leaf value contains non-finite entries")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self):
        return DiffValue(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"DiffValue(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays are lifted to constants
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

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _lift(x):
    if isinstance(x, DiffValue):
        return x
    return DiffValue(x)


def _make(data, op, inputs, vjp):
    """Wrap an op result, recording a node when any input needs gradients."""
    if STRICT_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced non-finite output")
    out = DiffValue.__new__(DiffValue)
    out.data = data
    out.grad = None
    out.requires_grad = any(v.requires_grad for v in inputs)
    out.node = _Node(op, inputs, vjp) if out.requires_grad else None
    return out


def _check_broadcast(sa, sb, op):
    """Trailing-aligned broadcast check; returns the result shape."""
    out = []
    for da, db in zip(reversed(sa), reversed(sb)):
        if da == db or da == 1 or db == 1:
            out.append(max(da, db))
        else:
            raise ShapeError(f"{op}: cannot broadcast {sa} with {sb}")
    longer = sa if len(sa) >= len(sb) else sb
    out.extend(longer[: len(longer) - len(out)][::-1])
    return tuple(reversed(out))


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape, "add")
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def subtract(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape, "subtract")
    return _make(a.data - b.data, "subtract", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def multiply(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape, "multiply")
    return _make(a.data * b.data, "multiply", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def divide(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape, "divide")
    return _make(a.data / b.data, "divide", (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def scale(a, c):
    """Multiply by a plain Python scalar (not differentiable in c)."""
    a = _lift(a)
    c = float(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def square(a):
    a = _lift(a)
    return _make(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a):
    a = _lift(a)
    out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def exp(a):
    a = _lift(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a):
    a = _lift(a)
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def absolute(a):
    a = _lift(a)
    return _make(np.abs(a.data), "absolute", (a,),
                 lambda g: (g * np.sign(a.data),))


def sigmoid(a):
    a = _lift(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def silu(a):
    a = _lift(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s
    return _make(out, "silu", (a,),
                 lambda g: (g * (s + a.data * s * (1.0 - s)),))


def softplus(a):
    a = _lift(a)
    # overflow-safe: log(1+e^x) = max(x,0) + log1p(e^-|x|)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, "softplus", (a,), lambda g: (g * s,))


# ---------------------------------------------------------------------------
# reductions and shape ops

def mean(a, axis=None, keepdims=False):
    a = _lift(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / max(out.size, 1)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / n,)

    return _make(np.asarray(out), "mean", (a,), vjp)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), "sum", (a,), vjp)


def reshape(a, shape):
    a = _lift(a)
    return _make(a.data.reshape(shape), "reshape", (a,),
                 lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = _lift(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _make(out, "transpose", (a,),
                 lambda g: (np.transpose(g, inv),))


def getitem(a, idx):
    a = _lift(a)
    out = a.data[idx]

    def vjp(g):
        buf = np.zeros(a.shape)
        buf[idx] += g
        return (buf,)

    return _make(np.asarray(out), "getitem", (a,), vjp)


def concat(values, axis=0):
    values = [_lift(v) for v in values]
    out = np.concatenate([v.data for v in values], axis=axis)
    sizes = [v.shape[axis] for v in values]
    offs = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(values)):
            sl[axis] = slice(offs[i], offs[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(out, "concat", tuple(values), vjp)


def broadcast_to(a, shape):
    a = _lift(a)
    _check_broadcast(a.shape, tuple(shape), "broadcast_to")
    out = np.broadcast_to(a.data, shape).copy()
    return _make(out, "broadcast_to", (a,),
                 lambda g: (_unbroadcast(g, a.shape),))


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    return _make(a.data @ b.data, "matmul", (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


# ---------------------------------------------------------------------------
# convolutions

def _correlate_same_1d(x, taps):
    """Zero-padded 'same' cross-correlation of a 1-D signal with odd taps."""
    k = len(taps)
    half = k // 2
    xp = np.zeros(len(x) + 2 * half)
    xp[half:half + len(x)] = x
    out = np.zeros(len(x))
    for j in range(k):
        out += taps[j] * xp[j:j + len(x)]
    return out


def conv1d_same(a, taps):
    """1-D convolution with a fixed (non-learned) odd-length kernel, zero padded.

    For the symmetric FIR kernels used here, correlation equals convolution;
    the adjoint correlates with the reversed taps.
    """
    a = _lift(a)
    taps = np.asarray(taps, dtype=np.float64)
    if a.data.ndim != 1:
        raise ShapeError(f"conv1d_same: expects 1-D input, got {a.shape}")
    if taps.ndim != 1 or len(taps) % 2 == 0:
        raise ShapeError(f"conv1d_same: taps must be odd-length 1-D, got {taps.shape}")
    out = _correlate_same_1d(a.data, taps)
    rev = taps[::-1].copy()
    return _make(out, "conv1d_same", (a,),
                 lambda g: (_correlate_same_1d(g, rev),))


def depthwise_conv1d(a, taps):
    """Per-channel temporal convolution, centered, zero padded.

    a: (T, C); taps: (K, C) with K odd, taps may be learned.
    """
    a, taps = _lift(a), _lift(taps)
    if a.data.ndim != 2 or taps.data.ndim != 2:
        raise ShapeError(f"depthwise_conv1d: expects (T,C) and (K,C), got {a.shape}, {taps.shape}")
    if a.shape[1] != taps.shape[1]:
        raise ShapeError(f"depthwise_conv1d: channel mismatch {a.shape} vs {taps.shape}")
    k = taps.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"depthwise_conv1d: kernel length must be odd, got {k}")
    t, c = a.shape
    half = k // 2
    xp = np.zeros((t + 2 * half, c))
    xp[half:half + t] = a.data
    out = np.zeros((t, c))
    for j in range(k):
        out += taps.data[j] * xp[j:j + t]

    def vjp(g):
        gp = np.zeros((t + 2 * half, c))
        gp[half:half + t] = g
        gx = np.zeros((t, c))
        gk = np.zeros((k, c))
        for j in range(k):
            gx += taps.data[j] * gp[(k - 1 - j):(k - 1 - j) + t]
            gk[j] = (g * xp[j:j + t]).sum(axis=0)
        return gx, gk

    return _make(out, "depthwise_conv1d", (a, taps), vjp)


def conv2d(a, w, b=None):
    """Spatial convolution over (T, H, W, Cin) with kernel (kh, kw, Cin, Cout).

    Zero padded 'same'; T is a batch axis. Odd kernel extents only.
    """
    a, w = _lift(a), _lift(w)
    if a.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expects (T,H,W,Ci) and (kh,kw,Ci,Co), got {a.shape}, {w.shape}")
    kh, kw, ci, co = w.shape
    if kh % 2 == 0 or kw % 2 == 0 or a.shape[3] != ci:
        raise ShapeError(f"conv2d: incompatible shapes {a.shape} vs {w.shape}")
    t, h, wd, _ = a.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((t, h + 2 * ph, wd + 2 * pw, ci))
    xp[:, ph:ph + h, pw:pw + wd] = a.data
    out = np.zeros((t, h, wd, co))
    for dy in range(kh):
        for dx in range(kw):
            patch = xp[:, dy:dy + h, dx:dx + wd].reshape(-1, ci)
            out += (patch @ w.data[dy, dx]).reshape(t, h, wd, co)

    inputs = [a, w]
    if b is not None:
        b = _lift(b)
        if b.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({co},)")
        out = out + b.data
        inputs.append(b)

    def vjp(g):
        gf = g.reshape(-1, co)
        gx = np.zeros_like(xp)
        gw = np.zeros((kh, kw, ci, co))
        for dy in range(kh):
            for dx in range(kw):
                patch = xp[:, dy:dy + h, dx:dx + wd].reshape(-1, ci)
                gw[dy, dx] = patch.T @ gf
                gx[:, dy:dy + h, dx:dx + wd] += (gf @ w.data[dy, dx].T).reshape(t, h, wd, ci)
        grads = [gx[:, ph:ph + h, pw:pw + wd], gw]
        if b is not None:
            grads.append(gf.sum(axis=0))
        return tuple(grads)

    return _make(out, "conv2d", tuple(inputs), vjp)


def conv3d(a, w, b=None):
    """Spatio-temporal convolution over (T, H, W, Cin), kernel (kt, kh, kw, Cin, Cout).

    Zero padded 'same' on all three axes. Odd kernel extents only.
    """
    a, w = _lift(a), _lift(w)
    if a.data.ndim != 4 or w.data.ndim != 5:
        raise ShapeError(f"conv3d: expects (T,H,W,Ci) and (kt,kh,kw,Ci,Co), got {a.shape}, {w.shape}")
    kt, kh, kw, ci, co = w.shape
    if kt % 2 == 0 or kh % 2 == 0 or kw % 2 == 0 or a.shape[3] != ci:
        raise ShapeError(f"conv3d: incompatible shapes {a.shape} vs {w.shape}")
    t, h, wd, _ = a.shape
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    xp = np.zeros((t + 2 * pt, h + 2 * ph, wd + 2 * pw, ci))
    xp[pt:pt + t, ph:ph + h, pw:pw + wd] = a.data
    out = np.zeros((t, h, wd, co))
    for dt in range(kt):
        for dy in range(kh):
            for dx in range(kw):
                patch = xp[dt:dt + t, dy:dy + h, dx:dx + wd].reshape(-1, ci)
                out += (patch @ w.data[dt, dy, dx]).reshape(t, h, wd, co)

    inputs = [a, w]
    if b is not None:
        b = _lift(b)
        if b.shape != (co,):
            raise ShapeError(f"conv3d: bias shape {b.shape} != ({co},)")
        out = out + b.data
        inputs.append(b)

    def vjp(g):
        gf = g.reshape(-1, co)
        gx = np.zeros_like(xp)
        gw = np.zeros((kt, kh, kw, ci, co))
        for dt in range(kt):
            for dy in range(kh):
                for dx in range(kw):
                    patch = xp[dt:dt + t, dy:dy + h, dx:dx + wd].reshape(-1, ci)
                    gw[dt, dy, dx] = patch.T @ gf
                    gx[dt:dt + t, dy:dy + h, dx:dx + wd] += (
                        gf @ w.data[dt, dy, dx].T).reshape(t, h, wd, ci)
        grads = [gx[pt:pt + t, ph:ph + h, pw:pw + wd], gw]
        if b is not None:
            grads.append(gf.sum(axis=0))
        return tuple(grads)

    return _make(out, "conv3d", tuple(inputs), vjp)


_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def blur2(a, taps=_BINOMIAL5):
    """Separable per-channel spatial blur on (T, H, W, C), zero padded.

    The symmetric kernel makes the op self-adjoint, which the pyramid
    reconstruction relies on only through exact forward reuse.
    """
    a = _lift(a)
    taps = np.asarray(taps, dtype=np.float64)
    if a.data.ndim != 4:
        raise ShapeError(f"blur2: expects (T,H,W,C), got {a.shape}")
    k = len(taps)
    half = k // 2

    def run(x):
        t, h, w, c = x.shape
        xp = np.zeros((t, h + 2 * half, w, c))
        xp[:, half:half + h] = x
        y = np.zeros_like(x)
        for j in range(k):
            y += taps[j] * xp[:, j:j + h]
        yp = np.zeros((t, h, w + 2 * half, c))
        yp[:, :, half:half + w] = y
        z = np.zeros_like(x)
        for j in range(k):
            z += taps[j] * yp[:, :, j:j + w]
        return z

    out = run(a.data)
    return _make(out, "blur2", (a,), lambda g: (run(g),))


def down2(a):
    """Take every second pixel along H and W."""
    a = _lift(a)
    if a.data.ndim != 4:
        raise ShapeError(f"down2: expects (T,H,W,C), got {a.shape}")
    return getitem(a, (slice(None), slice(None, None, 2), slice(None, None, 2)))


def up2zero(a):
    """Zero-stuff H and W by 2x; adjoint is plain ::2 sampling."""
    a = _lift(a)
    if a.data.ndim != 4:
        raise ShapeError(f"up2zero: expects (T,H,W,C), got {a.shape}")
    t, h, w, c = a.shape
    out = np.zeros((t, 2 * h, 2 * w, c))
    out[:, ::2, ::2] = a.data
    return _make(out, "up2zero", (a,), lambda g: (g[:, ::2, ::2].copy(),))


def repeat2(a):
    """Nearest-neighbour 2x spatial upsampling; adjoint sums 2x2 blocks."""
    a = _lift(a)
    if a.data.ndim != 4:
        raise ShapeError(f"repeat2: expects (T,H,W,C), got {a.shape}")
    t, h, w, c = a.shape
    out = np.repeat(np.repeat(a.data, 2, axis=1), 2, axis=2)

    def vjp(g):
        return (g.reshape(t, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _make(out, "repeat2", (a,), vjp)


# ---------------------------------------------------------------------------
# recurrence

def scan(state_decay, drive):
    """Linear recurrence out[t] = state_decay[t] * out[t-1] + drive[t], out[-1] = 0.

    Both inputs are (T, M); differentiable with respect to both.
    """
    d, u = _lift(state_decay), _lift(drive)
    if d.shape != u.shape:
        raise ShapeError(f"scan: shape mismatch {d.shape} vs {u.shape}")
    if d.data.ndim != 2:
        raise ShapeError(f"scan: expects (T,M) inputs, got {d.shape}")
    t = d.shape[0]
    out = np.zeros_like(u.data)
    prev = np.zeros(d.shape[1])
    for i in range(t):
        prev = d.data[i] * prev + u.data[i]
        out[i] = prev

    def vjp(g):
        gd = np.zeros_like(d.data)
        gu = np.zeros_like(u.data)
        acc = np.zeros(d.shape[1])
        for i in range(t - 1, -1, -1):
            acc = g[i] + (d.data[i + 1] * acc if i + 1 < t else 0.0)
            gu[i] = acc
            gd[i] = acc * (out[i - 1] if i > 0 else 0.0)
        return gd, gu

    return _make(out, "scan", (d, u), vjp)


def softmax(a, axis=-1):
    """Softmax composed from primitives; the row max is treated as constant,
    which is exact because softmax is shift invariant."""
    a = _lift(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = exp(subtract(a, m))
    s = sum(e, axis=axis, keepdims=True)
    return divide(e, s)


# ---------------------------------------------------------------------------
# backward pass and verification

def topo_order(root):
    """All reachable noded values, inputs before consumers."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        v, done = stack.pop()
        if done:
            order.append(v)
            continue
        if id(v) in seen or v.node is None:
            continue
        seen.add(id(v))
        stack.append((v, True))
        for inp in v.node.inputs:
            stack.append((inp, False))
    return order


def backward(root):
    """Accumulate d(root)/d(leaf) into the grad of every requires_grad leaf.

    root must be scalar. Repeated calls keep adding into leaf grads.
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if root.node is None and not root.requires_grad:
        return
    flows = {id(root): np.ones_like(root.data)}
    order = topo_order(root)
    for v in reversed(order):
        g = flows.pop(id(v), None)
        if g is None:
            continue
        grads = v.node.vjp(g)
        for inp, gi in zip(v.node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                flows[key] = gi if key not in flows else flows[key] + gi
    # leaves passed directly as root
    if root.node is None and root.requires_grad:
        root.grad = (np.ones_like(root.data) if root.grad is None
                     else root.grad + 1.0)


def grad_check(f, x, eps=1e-4):
    """Max relative error between analytic and central-difference gradients.

    f maps a DiffValue to a scalar DiffValue; x supplies the point. Error is
    |analytic - numeric| / (|analytic| + |numeric| + 1e-8) per coordinate.
    """
    leaf = DiffValue(x.data.copy() if isinstance(x, DiffValue) else np.asarray(x, float),
                     requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    flat = leaf.data.ravel()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(DiffValue(leaf.data)).data)
        flat[i] = orig - eps
        lo = float(f(DiffValue(leaf.data)).data)
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * eps)
        a = analytic.ravel()[i]
        err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-8)
        worst = max(worst, err)
    return worst


def grad_check_coords(f, x, coords, eps=1e-4):
    """grad_check restricted to a handful of flat coordinates of x."""
    leaf = DiffValue(np.asarray(x.data if isinstance(x, DiffValue) else x, float).copy(),
                     requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    flat = leaf.data.ravel()
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(DiffValue(leaf.data)).data)
        flat[i] = orig - eps
        lo = float(f(DiffValue(leaf.data)).data)
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * eps)
        a = analytic.ravel()[i]
        err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-8)
        worst = max(worst, err)
    return worst
