"""Minimal reverse-mode automatic differentiation engine.

Provides exactly the operators the counting network, the patch GAN and the
losses need: conv2d, max_pool2d, upsample_nearest, dense, the four
activations, global average pooling, MSE, and a handful of elementwise glue
ops. Values are dense numpy arrays; graphs are built eagerly and
differentiated by a topological backward sweep.

Training runs in 32-bit; gradient verification requires the 64-bit mode
(see `use_dtype`). There is no broadcasting beyond bias addition: any other
shape mismatch is a hard `ShapeError`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import GradientError, ShapeError

_DEFAULT_DTYPE = np.float32
_ALLOWED_DTYPES = (np.float32, np.float64)


def default_dtype():
    """Active compute dtype for newly created tensors."""
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in _ALLOWED_DTYPES:
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the engine dtype (e.g. float64 for grad checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """Dense array node of the compute graph.

    Tensors are immutable once written, except parameter buffers mutated by
    the optimizer between graph builds. A tensor created from an operation
    remembers its parents and a closure computing parent gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item", "size", 1, self.data.size)
        return float(self.data.reshape(()))

    def detach(self):
        """Same values, cut from the graph. Shares the underlying buffer."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Scalar/elementwise operator sugar; tensor-tensor forms require equal shapes.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("div", "operand", "scalar", "tensor")
        return mul(self, 1.0 / float(other))


def _result(data, parents, backward_fn):
    """Wrap an op result; drops graph bookkeeping when no parent needs grads."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(op, "shape", a.data.shape, b.data.shape)


# ---------------------------------------------------------------------------
# elementwise glue
# ---------------------------------------------------------------------------

def add(a, b):
    if not isinstance(b, Tensor):
        k = float(b)
        return _result(a.data + k, (a,), lambda g: (g,))
    _check_same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if not isinstance(b, Tensor):
        k = float(b)
        return _result(a.data - k, (a,), lambda g: (g,))
    _check_same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    if not isinstance(b, Tensor):
        k = float(b)
        return _result(a.data * k, (a,), lambda g: (g * k,))
    _check_same_shape("mul", a, b)
    out = a.data * b.data

    def backward(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    return _result(out, (a, b), backward)


def sum_all(x):
    """Sum of all elements, as a scalar tensor."""
    shape = x.data.shape

    def backward(g):
        return (np.full(shape, float(g), dtype=x.data.dtype),)

    return _result(x.data.sum(), (x,), backward)


def mean_all(x):
    """Mean over all elements, as a scalar tensor."""
    shape = x.data.shape
    inv = 1.0 / x.data.size

    def backward(g):
        return (np.full(shape, float(g) * inv, dtype=x.data.dtype),)

    return _result(x.data.mean(), (x,), backward)


def log(x):
    def backward(g):
        return (g / x.data,)

    return _result(np.log(x.data), (x,), backward)


def softplus(x):
    """log(1 + exp(x)), computed stably; gradient is sigmoid(x)."""
    out = np.logaddexp(x.data.dtype.type(0), x.data)

    def backward(g):
        return (g * _sigmoid_values(x.data),)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

LEAKY_SLOPE = 0.2


def _sigmoid_values(x):
    # Stable two-sided evaluation, then clipped into the open interval so
    # sigmoid heads satisfy their strict (0, 1) range even when saturated.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    tiny = np.nextafter(x.dtype.type(0), x.dtype.type(1))
    top = np.nextafter(x.dtype.type(1), x.dtype.type(0))
    return np.clip(out, tiny, top)


def relu(x):
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, x.data.dtype.type(0)), (x,), backward)


def leaky_relu(x, slope=LEAKY_SLOPE):
    mask = x.data > 0

    def backward(g):
        return (g * np.where(mask, g.dtype.type(1), g.dtype.type(slope)),)

    return _result(np.where(mask, x.data, x.data * x.data.dtype.type(slope)), (x,), backward)


def sigmoid(x):
    s = _sigmoid_values(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _result(s, (x,), backward)


def tanh(x):
    t = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - t * t),)

    return _result(t, (x,), backward)


_ACTIVATIONS = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "leaky_relu": leaky_relu,
}


def activation(x, kind):
    """Apply one of {relu, sigmoid, tanh, leaky_relu} elementwise."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; choose from {sorted(_ACTIVATIONS)}")
    return fn(x)


# ---------------------------------------------------------------------------
# structured ops
# ---------------------------------------------------------------------------

@dataclass
class ConvParams:
    """Weights and geometry of one 2-D convolution (cross-correlation)."""

    weights: Tensor  # [Cout, Cin, Kh, Kw]
    bias: Tensor  # [Cout]
    stride: int = 1
    padding: int = 0
    dilation: int = 1


def conv_output_extent(extent, kernel, stride, padding, dilation):
    return (extent + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(x, params):
    """Cross-correlation with dilation. Input [B,Cin,H,W] -> [B,Cout,H',W']."""
    if x.data.ndim != 4:
        raise ShapeError("conv2d", "input rank", 4, x.data.ndim)
    w, bias = params.weights, params.bias
    cout, cin_w, kh, kw = w.data.shape
    batch, cin, h, wid = x.data.shape
    if cin != cin_w:
        raise ShapeError("conv2d", "input channels", cin_w, cin)
    if bias.data.shape != (cout,):
        raise ShapeError("conv2d", "bias channels", (cout,), bias.data.shape)
    s, p, d = params.stride, params.padding, params.dilation
    ho = conv_output_extent(h, kh, s, p, d)
    wo = conv_output_extent(wid, kw, s, p, d)
    if ho < 1:
        raise ShapeError("conv2d", "output height", ">= 1", ho)
    if wo < 1:
        raise ShapeError("conv2d", "output width", ">= 1", wo)

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    sb, sc, sh, sw = xp.strides
    # Zero-copy window view [B, Cin, Ho, Wo, Kh, Kw]; tensordot does the GEMM.
    windows = as_strided(
        xp,
        shape=(batch, cin, ho, wo, kh, kw),
        strides=(sb, sc, sh * s, sw * s, sh * d, sw * d),
        writeable=False,
    )
    out = np.tensordot(windows, w.data, axes=((1, 4, 5), (1, 2, 3)))  # [B,Ho,Wo,Cout]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out += bias.data.reshape(1, cout, 1, 1)

    def backward(g):
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.tensordot(g, windows, axes=((0, 2, 3), (0, 2, 3)))
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            cols = np.tensordot(g, w.data, axes=((1,), (0,)))  # [B,Ho,Wo,Cin,Kh,Kw]
            cols = cols.transpose(0, 3, 1, 2, 4, 5)  # [B,Cin,Ho,Wo,Kh,Kw]
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i * d: i * d + s * ho: s, j * d: j * d + s * wo: s] += cols[:, :, :, :, i, j]
            gx = gxp[:, :, p: p + h, p: p + wid] if p else gxp
        return (gx, gw, gb)

    return _result(out, (x, w, bias), backward)


def max_pool2d(x, window=2):
    """Non-overlapping max pooling; ties route gradient to the first maximal
    element in row-major window order."""
    if x.data.ndim != 4:
        raise ShapeError("max_pool2d", "input rank", 4, x.data.ndim)
    batch, ch, h, w = x.data.shape
    if h % window or w % window:
        raise ShapeError(
            "max_pool2d (pad the input to an even extent first)",
            "spatial extent", f"divisible by {window}", (h, w),
        )
    ho, wo = h // window, w // window
    tiles = x.data.reshape(batch, ch, ho, window, wo, window)
    flat = np.ascontiguousarray(tiles.transpose(0, 1, 2, 4, 3, 5)).reshape(
        batch, ch, ho, wo, window * window)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(batch, ch, ho, wo, window, window)
        gx = gx.transpose(0, 1, 2, 4, 3, 5).reshape(batch, ch, h, w)
        return (np.ascontiguousarray(gx),)

    return _result(out, (x,), backward)


def upsample_nearest(x, factor=2):
    """Replicate each pixel into a factor x factor block."""
    if x.data.ndim != 4:
        raise ShapeError("upsample_nearest", "input rank", 4, x.data.ndim)
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if factor == 1:
        return _result(x.data.copy(), (x,), lambda g: (g,))
    batch, ch, h, w = x.data.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        return (g.reshape(batch, ch, h, factor, w, factor).sum(axis=(3, 5)),)

    return _result(out, (x,), backward)


def dense(x, weights, bias):
    """Affine map: x[B,Fin] @ weights[Fout,Fin]^T + bias[Fout]."""
    if x.data.ndim != 2:
        raise ShapeError("dense", "input rank", 2, x.data.ndim)
    fout, fin = weights.data.shape
    if x.data.shape[1] != fin:
        raise ShapeError("dense", "input features", fin, x.data.shape[1])
    if bias.data.shape != (fout,):
        raise ShapeError("dense", "bias features", (fout,), bias.data.shape)
    out = x.data @ weights.data.T + bias.data

    def backward(g):
        gx = g @ weights.data if x.requires_grad else None
        gw = g.T @ x.data if weights.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return (gx, gw, gb)

    return _result(out, (x, weights, bias), backward)


def global_avg_pool(x):
    """Per-channel spatial mean: [B,C,H,W] -> [B,C]."""
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool", "input rank", 4, x.data.ndim)
    batch, ch, h, w = x.data.shape
    inv = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None], (batch, ch, h, w)) * inv,)

    return _result(x.data.mean(axis=(2, 3)), (x,), backward)


def scale_channels(x, w):
    """Multiply x[B,C,H,W] by per-channel weights w[B,C] (channel attention)."""
    batch, ch = x.data.shape[:2]
    if w.data.shape != (batch, ch):
        raise ShapeError("scale_channels", "weights shape", (batch, ch), w.data.shape)
    wb = w.data[:, :, None, None]

    def backward(g):
        gx = g * wb if x.requires_grad else None
        gw = (g * x.data).sum(axis=(2, 3)) if w.requires_grad else None
        return (gx, gw)

    return _result(x.data * wb, (x, w), backward)


def scale_spatial(x, mask):
    """Multiply x[B,C,H,W] by a single-channel mask [B,1,H,W] (spatial attention)."""
    batch, _, h, w = x.data.shape
    if mask.data.shape != (batch, 1, h, w):
        raise ShapeError("scale_spatial", "mask shape", (batch, 1, h, w), mask.data.shape)

    def backward(g):
        gx = g * mask.data if x.requires_grad else None
        gm = (g * x.data).sum(axis=1, keepdims=True) if mask.requires_grad else None
        return (gx, gm)

    return _result(x.data * mask.data, (x, mask), backward)


def mse_loss(pred, target):
    """Mean over all elements of the squared difference.

    The target never receives gradients. With the per-element mean this is
    the batch-averaged squared L2 norm up to a constant per-sample rescaling,
    keeping loss magnitude independent of output resolution.
    """
    tdata = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    if pred.data.shape != tdata.shape:
        raise ShapeError("mse_loss", "shape", tdata.shape, pred.data.shape)
    diff = pred.data - tdata
    inv = 1.0 / diff.size

    def backward(g):
        return (diff * (2.0 * inv * float(g)),)

    return _result((diff * diff).mean(), (pred,), backward)


# ---------------------------------------------------------------------------
# backward sweep
# ---------------------------------------------------------------------------

def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order  # parents precede children


def backward(loss):
    """Reverse-mode sweep from a scalar loss.

    Gradients are written into `.grad` of every reachable tensor with
    `requires_grad`; repeated calls without zeroing accumulate additively.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = _toposort(loss)
    flowing = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            held = flowing.get(key)
            flowing[key] = pg if held is None else held + pg


def zero_grad(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam. Moment buffers are allocated on first use."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, state):
    """Apply one in-place Adam update to `params`, then zero their grads."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise GradientError("AdamState tracks a different parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    scale = state.learning_rate / corr1
    for p, m, v in zip(params, state.m, state.v):
        if p.grad is None:
            raise GradientError(f"parameter {p.name or '<unnamed>'} has no gradient; run backward first")
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= scale * m / (np.sqrt(v / corr2) + state.epsilon)
        p.grad = None


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def graph_parameters(loss):
    """Leaf tensors with requires_grad reachable from `loss`, in graph order."""
    return [t for t in _toposort(loss) if t.requires_grad and not t._parents]


def grad_check(build, eps=1e-6, params=None, entries_per_param=4):
    """Compare analytic gradients against central finite differences.

    `build` is a zero-argument graph constructor returning the scalar loss;
    it must close over persistent parameter tensors so that perturbing
    `param.data` in place changes the rebuilt loss. For each parameter the
    entries with the largest analytic gradient magnitude are probed - those
    are the entries where central differences rise above the float64
    rounding floor, so the comparison carries signal. Returns the max over
    probed entries of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    Requires the 64-bit mode; finite differences are meaningless at 32-bit.
    """
    if default_dtype() is not np.float64:
        raise GradientError("grad_check requires float64 mode; wrap in use_dtype(np.float64)")
    loss = build()
    if params is None:
        params = graph_parameters(loss)
    zero_grad(params)
    backward(loss)
    analytic = []
    for p in params:
        if p.grad is None:
            raise GradientError(f"parameter {p.name or '<unnamed>'} unreachable from the loss")
        analytic.append(p.grad.copy())
    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = ana.reshape(-1)
        n = min(entries_per_param, flat.size)
        picks = np.argsort(-np.abs(aflat), kind="stable")[:n]
        for i in picks:
            orig = flat[i]
            h = eps * max(1.0, abs(orig))
            flat[i] = orig + h
            above = build().item()
            flat[i] = orig - h
            below = build().item()
            flat[i] = orig
            numeric = (above - below) / (2.0 * h)
            rel = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, rel)
    zero_grad(params)
    return worst


# Every graph-building operation above, by public name. Gradient-checking
# harnesses iterate this list so coverage cannot silently rot when ops are
# added.
DIFFERENTIABLE_OPS = (
    "add", "sub", "mul", "sum_all", "mean_all", "log", "softplus",
    "relu", "leaky_relu", "sigmoid", "tanh",
    "conv2d", "max_pool2d", "upsample_nearest", "dense",
    "global_avg_pool", "scale_channels", "scale_spatial", "mse_loss",
)
