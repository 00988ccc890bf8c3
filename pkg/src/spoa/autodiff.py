"""Dense tensor primitives with record-and-replay reverse-mode gradients.

Values are float64 numpy arrays, image-shaped ``(H, W, C)`` with an optional
leading batch axis, or scalars / ``(B,)`` vectors for network scores.  The
four differentiable primitives needed by the networks are same-padded 2-D
convolution, LeakyReLU, the logistic sigmoid and a normalized global inner
product; ``add``, ``scale``, ``add_bias`` and ``weighted_sum`` exist only so
residual blocks and batch losses can be composed from those primitives.

Every public operation validates that its result is finite; NaN or Inf is
raised as :class:`NonFiniteError` instead of being propagated silently.
"""

from __future__ import annotations

import math
import threading

import numpy as np


class NonFiniteError(ArithmeticError):
    """A tensor operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


def _ensure_finite(value, op: str):
    # Summing is a single fused pass; any NaN/Inf poisons the sum.  Mixed
    # +Inf/-Inf yields NaN, so one isfinite on the sum catches every case.
    if isinstance(value, np.ndarray):
        total = float(value.sum())
    else:
        total = float(value)
    if not math.isfinite(total):
        raise NonFiniteError(f"{op} produced a non-finite value")


class Var:
    """Node in a recorded forward trace.

    ``data`` holds the forward value; after :func:`backward` has run,
    ``grad`` holds the gradient of the seeded scalar/tensor with respect
    to this node.  Leaves created with ``needs_grad=False`` may skip their
    gradient entirely (network inputs that nothing differentiates against).
    """

    __slots__ = ("data", "grad", "_parents", "_backward", "needs_grad")

    def __init__(self, data, parents=(), backward_fn=None, needs_grad=True):
        self.data = data
        self.grad = None
        self._parents = parents
        self._backward = backward_fn
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return np.shape(self.data)

    def accumulate(self, g, own=False):
        # ``own=True`` promises g is freshly allocated and may be adopted
        # and mutated in place; shared upstream buffers must be copied.
        if self.grad is None:
            if isinstance(g, np.ndarray):
                self.grad = g if own else g.copy()
            else:
                self.grad = g
        elif isinstance(self.grad, np.ndarray):
            self.grad += g
        else:
            self.grad = self.grad + g


def _as_value(x):
    return x.data if isinstance(x, Var) else x


def _as_var(x):
    return x if isinstance(x, Var) else Var(x)


# ---------------------------------------------------------------------------
# raw (trace-free) kernels
# ---------------------------------------------------------------------------

class _ScratchPool(threading.local):
    """Reusable per-thread work buffers for the convolution hot path.

    Returned buffers are valid only until the next request for the same
    shape; nothing retained on a trace may live in the pool.
    """

    def __init__(self):
        self.buffers = {}

    def take(self, shape):
        buf = self.buffers.get(shape)
        if buf is None:
            buf = np.empty(shape)
            self.buffers[shape] = buf
        return buf


_POOL = _ScratchPool()


def _zero_pad(x, ph, pw, scratch=False):
    b, h, w, c = x.shape
    shape = (b, h + 2 * ph, w + 2 * pw, c)
    if scratch:
        xp = _POOL.take(shape)
        xp[:, :ph] = 0.0
        xp[:, h + ph:] = 0.0
        xp[:, ph:h + ph, :pw] = 0.0
        xp[:, ph:h + ph, w + pw:] = 0.0
    else:
        xp = np.zeros(shape)
    xp[:, ph:h + ph, pw:w + pw] = x
    return xp


def _cols_from_padded(xp, b, h, w, kh, kw):
    c = xp.shape[3]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # window axes come out as (B,H,W,C,kh,kw); kernel layout is (kh,kw,C,out)
    cols = _POOL.take((b * h * w, kh * kw * c))
    np.copyto(cols.reshape(b, h, w, kh, kw, c), win.transpose(0, 1, 2, 4, 5, 3))
    return cols


def _conv_cols(x, kh, kw):
    """im2col into a scratch buffer: patches of padded ``x`` as (B*H*W, kh*kw*C)."""
    b, h, w, _ = x.shape
    return _cols_from_padded(_zero_pad(x, kh // 2, kw // 2, scratch=True), b, h, w, kh, kw)


def _check_conv_args(x, weights, bias):
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be (H,W,C) or (B,H,W,C), got {x.shape}")
    if weights.ndim != 4:
        raise ShapeError(f"conv2d kernel must be (kh,kw,in,out), got {weights.shape}")
    kh, kw, cin, cout = weights.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel dims must be odd, got {kh}x{kw}")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[-1]}, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")


def conv2d_raw(x, weights, bias):
    """Zero-padded "same" convolution; output shape (..., H, W, out_channels)."""
    x = np.asarray(x, dtype=np.float64)
    _check_conv_args(x, weights, bias)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    b, h, w, _ = x.shape
    kh, kw, cin, cout = weights.shape
    cols = _conv_cols(x, kh, kw)
    out = cols @ weights.reshape(kh * kw * cin, cout)
    out += bias
    out = out.reshape(b, h, w, cout)
    return out[0] if squeeze else out


def _conv_input_grad(g, weights):
    # Gradient w.r.t. the input of a same-padded convolution is itself a
    # same-padded convolution of the upstream gradient with the kernel
    # flipped spatially and transposed in its channel axes.
    kh, kw, cin, cout = weights.shape
    flipped = weights[::-1, ::-1].transpose(0, 1, 3, 2)
    return conv2d_raw(g, np.ascontiguousarray(flipped), np.zeros(cin))


def leaky_relu_raw(x, slope):
    x = np.asarray(x, dtype=np.float64)
    return x * np.where(x >= 0, 1.0, slope)


def sigmoid_raw(x):
    """Numerically stable logistic; strictly inside (0,1) for finite input."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def log_sigmoid_raw(x):
    """log(sigmoid(x)) in its overflow-free form; finite for |x| <= 500."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))
    if out.ndim == 0:
        return float(out)
    return out


def inner_product_raw(a, b):
    """Mean of elementwise products; scalar, or (B,) when inputs are batched."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"inner_product shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 4:
        return (a * b).reshape(a.shape[0], -1).mean(axis=1)
    return float((a * b).mean())


# ---------------------------------------------------------------------------
# traced primitives
# ---------------------------------------------------------------------------

def conv2d(x, weights, bias):
    """Same-padded convolution as a traced op.

    ``x`` may be a Var or a plain array; ``weights``/``bias`` likewise.
    Only the padded input survives on the trace; the much larger im2col
    matrix is transient and rebuilt on the way back, which keeps the live
    working set of a recorded pass small.
    """
    xv, wv, bv = _as_var(x), _as_var(weights), _as_var(bias)
    xd = np.asarray(xv.data, dtype=np.float64)
    _check_conv_args(xd, wv.data, bv.data)
    squeeze = xd.ndim == 3
    xb = xd[None] if squeeze else xd
    b, h, w, _ = xb.shape
    kh, kw, cin, cout = wv.data.shape
    out = _conv_cols(xb, kh, kw) @ wv.data.reshape(kh * kw * cin, cout)
    out += bv.data
    out = out.reshape(b, h, w, cout)
    if squeeze:
        out = out[0]
    _ensure_finite(out, "conv2d")

    def backward_fn(g):
        # xb is a view of the parent's value, so nothing extra stays alive;
        # the im2col patches are regathered into scratch for the kernel grad.
        gb = g[None] if squeeze else g
        gmat = gb.reshape(b * h * w, cout)
        cols = _conv_cols(xb, kh, kw)
        gw = (cols.T @ gmat).reshape(kh, kw, cin, cout)
        del cols
        wv.accumulate(gw, own=True)
        bv.accumulate(gmat.sum(axis=0), own=True)
        if xv._backward is not None or xv.needs_grad:
            gx = _conv_input_grad(gb, wv.data)
            xv.accumulate(gx[0] if squeeze else gx, own=True)

    return Var(out, (xv, wv, bv), backward_fn)


def leaky_relu(x, slope=0.1):
    """Elementwise x if x >= 0 else slope*x, recorded on the trace."""
    if slope < 0:
        raise ValueError(f"leaky_relu slope must be >= 0, got {slope}")
    xv = _as_var(x)
    xd = np.asarray(xv.data, dtype=np.float64)
    out = leaky_relu_raw(xd, slope)
    _ensure_finite(out, "leaky_relu")

    def backward_fn(g):
        # recomputing the slope mask is cheaper than keeping it alive
        xv.accumulate(g * np.where(xd >= 0, 1.0, slope), own=True)

    return Var(out, (xv,), backward_fn)


def sigmoid(x):
    """Stable logistic on a scalar or (B,) score vector."""
    xv = _as_var(x)
    out = sigmoid_raw(xv.data)
    _ensure_finite(out, "sigmoid")

    def backward_fn(g):
        xv.accumulate(g * (out * (1.0 - np.asarray(out))), own=True)

    return Var(out, (xv,), backward_fn)


def log_sigmoid(x):
    xv = _as_var(x)
    out = log_sigmoid_raw(xv.data)
    _ensure_finite(out, "log_sigmoid")

    def backward_fn(g):
        # d/dx log sigmoid(x) = sigmoid(-x)
        xv.accumulate(g * sigmoid_raw(-np.asarray(xv.data, dtype=np.float64)), own=True)

    return Var(out, (xv,), backward_fn)


def inner_product(a, b):
    """Mean elementwise product of two same-shaped tensors (per batch item)."""
    av, bv = _as_var(a), _as_var(b)
    ad = np.asarray(av.data, dtype=np.float64)
    bd = np.asarray(bv.data, dtype=np.float64)
    out = inner_product_raw(ad, bd)
    _ensure_finite(out, "inner_product")
    n = ad[0].size if ad.ndim == 4 else ad.size

    def backward_fn(g):
        if ad.ndim == 4:
            gexp = np.asarray(g).reshape(-1, 1, 1, 1)
        else:
            gexp = g
        av.accumulate(gexp * bd / n, own=True)
        bv.accumulate(gexp * ad / n, own=True)

    return Var(out, (av, bv), backward_fn)


def add(a, b):
    av, bv = _as_var(a), _as_var(b)
    if np.shape(av.data) != np.shape(bv.data):
        raise ShapeError(f"add shape mismatch: {np.shape(av.data)} vs {np.shape(bv.data)}")
    out = av.data + bv.data
    _ensure_finite(out, "add")

    def backward_fn(g):
        av.accumulate(g)
        bv.accumulate(g)

    return Var(out, (av, bv), backward_fn)


def scale(x, c):
    """Multiply by a (non-trainable) scalar constant."""
    xv = _as_var(x)
    out = xv.data * c
    _ensure_finite(out, "scale")

    def backward_fn(g):
        xv.accumulate(g * c, own=True)

    return Var(out, (xv,), backward_fn)


def add_bias(x, bias):
    """Add a trainable scalar (0-d array param) to a scalar or (B,) score."""
    xv, bv = _as_var(x), _as_var(bias)
    out = xv.data + float(bv.data)
    _ensure_finite(out, "add_bias")

    def backward_fn(g):
        xv.accumulate(g)
        bv.accumulate(np.asarray(np.sum(g)), own=True)

    return Var(out, (xv, bv), backward_fn)


def weighted_sum(x, weights):
    """Fixed-weight contraction of a (B,) vector to a scalar."""
    xv = _as_var(x)
    wts = np.asarray(weights, dtype=np.float64)
    if np.shape(xv.data) != wts.shape:
        raise ShapeError(f"weighted_sum shape mismatch: {np.shape(xv.data)} vs {wts.shape}")
    out = float(np.dot(np.asarray(xv.data), wts))
    _ensure_finite(out, "weighted_sum")

    def backward_fn(g):
        xv.accumulate(g * wts, own=True)

    return Var(out, (xv,), backward_fn)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(root: Var, seed=1.0):
    """Propagate ``seed`` from ``root`` through the recorded trace.

    ``seed`` must match the root value's shape (a scalar for scalar roots).
    Gradients accumulate into ``.grad`` of every node in the trace,
    parameters and inputs included.
    """
    if isinstance(seed, np.ndarray) or isinstance(root.data, np.ndarray):
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != np.shape(root.data):
            raise ShapeError(
                f"backward seed shape {seed.shape} does not match root {np.shape(root.data)}")
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    root.grad = seed
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
