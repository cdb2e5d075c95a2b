"""Dense tensors with a reverse-mode differentiation tape.

Every continuous quantity in the system (waveform features, logits,
embeddings, losses) lives in a `Tensor`. Ops record closures onto an
implicit tape (the `_prev` graph); `backward()` replays them in reverse
topological order. float32 is the working precision; float64 is supported
so numerical checks can run at higher precision.

Broadcasting is restricted to a leading-batch convention: elementwise ops
accept equal shapes, a scalar, or a right-hand side whose shape is a
suffix of the left's. Anything else requires an explicit reshape.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operands have shapes the op does not accept."""


# Kernels must stay bit-deterministic while this is set (default). No kernel
# currently parallelizes, so the flag is a contract, not a dispatch switch.
DETERMINISTIC = True

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (eval-mode forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad=False, _prev=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = _prev
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- grad bookkeeping ---------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self, leaves=None):
        """Reverse pass from a scalar root.

        Visits each recorded node exactly once, in reverse recording order.
        `leaves`, if given, are tensors guaranteed to end up with a grad
        array of their own shape (zeros when they did not participate).
        """
        if self.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {self.shape}")
        # Iterative topo sort: tapes can be deep enough to blow the
        # recursion limit.
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
        if leaves is not None:
            for leaf in leaves:
                if leaf.grad is None:
                    leaf.grad = np.zeros_like(leaf.data)

    # -- operator sugar -----------------------------------------------------

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
            raise ShapeError("tensor/tensor division not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad=False, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype))


def _make(data, prev, backward):
    if _grad_enabled and any(p.requires_grad for p in prev):
        return Tensor(data, requires_grad=True, _prev=tuple(prev), _backward=None if backward is None else backward)
    return Tensor(data)


def _wrap_backward(out, fn):
    # Helper so op bodies can define the closure after creating `out`.
    out._backward = fn
    return out


# -- elementwise ops ---------------------------------------------------------


def _check_suffix(a_shape, b_shape):
    if b_shape == () or a_shape == b_shape:
        return
    if len(b_shape) <= len(a_shape) and a_shape[len(a_shape) - len(b_shape):] == b_shape:
        return
    raise ShapeError(f"shapes {a_shape} and {b_shape} not compatible (suffix broadcast only)")


def _reduce_to(g, shape):
    # Sum g down to `shape` (which is a suffix of g's shape, or scalar).
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(extra)))
    return g.reshape(shape)


def add(a, b):
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    _check_suffix(a.shape, b.shape)
    out = _make(a.data + b.data, (a, b), None)
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accumulate(_reduce_to(out.grad, a.shape))
            if b.requires_grad:
                b._accumulate(_reduce_to(out.grad, b.shape))
        _wrap_backward(out, _bw)
    return out


def sub(a, b):
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    _check_suffix(a.shape, b.shape)
    out = _make(a.data - b.data, (a, b), None)
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accumulate(_reduce_to(out.grad, a.shape))
            if b.requires_grad:
                b._accumulate(-_reduce_to(out.grad, b.shape))
        _wrap_backward(out, _bw)
    return out


def mul(a, b):
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    _check_suffix(a.shape, b.shape)
    out = _make(a.data * b.data, (a, b), None)
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accumulate(_reduce_to(out.grad * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_reduce_to(out.grad * a.data, b.shape))
        _wrap_backward(out, _bw)
    return out


def add_mask(x, mask):
    """Add a constant, numpy-broadcastable mask (e.g. -inf attention bans).

    The mask is not differentiable; gradients pass through to `x` untouched,
    so -inf entries cannot poison the backward pass.
    """
    mask = np.asarray(mask, dtype=x.data.dtype)
    out = _make(x.data + mask, (x,), None)
    if out.requires_grad:
        def _bw():
            if x.requires_grad:
                x._accumulate(np.broadcast_to(out.grad, x.shape).copy() if out.grad.shape != x.shape else out.grad)
        _wrap_backward(out, _bw)
    return out


def logaddexp(a, b):
    """Elementwise log(exp(a)+exp(b)), safe at -inf."""
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    if a.shape != b.shape:
        raise ShapeError(f"logaddexp needs equal shapes, got {a.shape} and {b.shape}")
    data = np.logaddexp(a.data, b.data)
    out = _make(data, (a, b), None)
    if out.requires_grad:
        def _bw():
            # softmax weights; where the output is -inf both inputs were
            # -inf and the derivative is taken as 0.
            with np.errstate(invalid="ignore"):
                wa = np.exp(a.data - data)
                wb = np.exp(b.data - data)
            dead = np.isneginf(data)
            wa[dead] = 0.0
            wb[dead] = 0.0
            if a.requires_grad:
                a._accumulate(out.grad * wa)
            if b.requires_grad:
                b._accumulate(out.grad * wb)
        _wrap_backward(out, _bw)
    return out


# -- shape ops ----------------------------------------------------------------


def reshape(x, shape):
    old = x.shape
    out = _make(x.data.reshape(shape), (x,), None)
    if out.requires_grad:
        def _bw():
            x._accumulate(out.grad.reshape(old))
        _wrap_backward(out, _bw)
    return out


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), None)
    if out.requires_grad:
        def _bw():
            x._accumulate(out.grad.transpose(inv))
        _wrap_backward(out, _bw)
    return out


def getitem(x, idx):
    out_data = x.data[idx]
    out = _make(np.ascontiguousarray(out_data), (x,), None)
    if out.requires_grad:
        def _bw():
            g = np.zeros_like(x.data)
            np.add.at(g, idx, out.grad)
            x._accumulate(g)
        _wrap_backward(out, _bw)
    return out


def concat(parts, axis=0):
    parts = list(parts)
    out = _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), None)
    if out.requires_grad:
        sizes = [p.shape[axis] for p in parts]
        def _bw():
            offset = 0
            for p, n in zip(parts, sizes):
                if p.requires_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis] = slice(offset, offset + n)
                    p._accumulate(out.grad[tuple(sl)])
                offset += n
        _wrap_backward(out, _bw)
    return out


def stack(parts, axis=0):
    parts = list(parts)
    out = _make(np.stack([p.data for p in parts], axis=axis), tuple(parts), None)
    if out.requires_grad:
        def _bw():
            for i, p in enumerate(parts):
                if p.requires_grad:
                    p._accumulate(np.take(out.grad, i, axis=axis))
        _wrap_backward(out, _bw)
    return out


# -- reductions ----------------------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    out = _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), None)
    if out.requires_grad:
        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(g, x.shape).astype(x.data.dtype))
        _wrap_backward(out, _bw)
    return out


def tmean(x, axis=None, keepdims=False):
    n = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- matmul -------------------------------------------------------------------


def matmul(a, b):
    """Matrix product with at most a shared leading-batch prefix.

    Accepts [..., n, k] @ [k, m] and [..., n, k] @ [..., k, m] with equal
    leading dims.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have ndim >= 2")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    out = _make(np.matmul(a.data, b.data), (a, b), None)
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                bt = np.swapaxes(b.data, -1, -2)
                a._accumulate(np.matmul(g, bt))
            if b.requires_grad:
                at = np.swapaxes(a.data, -1, -2)
                gb = np.matmul(at, g)
                if b.ndim == 2 and gb.ndim > 2:
                    gb = gb.sum(axis=tuple(range(gb.ndim - 2)))
                b._accumulate(gb)
        _wrap_backward(out, _bw)
    return out


# -- neural-net primitives ------------------------------------------------------


def conv1d(x, w, stride=1):
    """Valid (unpadded) 1-D convolution.

    x: [C_in, L] or [B, C_in, L]; w: [C_out, C_in, K].
    Output length is floor((L - K) / stride) + 1.
    """
    if not isinstance(stride, int) or stride < 1:
        raise ValueError(f"stride must be a positive int, got {stride}")
    if w.ndim != 3:
        raise ShapeError(f"kernel must be [C_out, C_in, K], got {w.shape}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise ShapeError(f"input must be [C_in, L] or [B, C_in, L], got {x.shape}")
    B, c_in, L = xd.shape
    c_out, c_in_w, K = w.shape
    if c_in != c_in_w:
        raise ShapeError(f"input channels {c_in} != kernel channels {c_in_w}")
    if L < K:
        raise ShapeError(f"input length {L} shorter than kernel {K}")
    l_out = (L - K) // stride + 1
    # im2col: [B, C_in, l_out, K] -> [B, l_out, C_in*K], one GEMM per batch.
    windows = np.lib.stride_tricks.sliding_window_view(xd, K, axis=2)[:, :, ::stride, :]
    patches = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(B, l_out, c_in * K)
    w_flat = w.data.reshape(c_out, c_in * K)
    out_data = np.matmul(patches, w_flat.T).transpose(0, 2, 1)  # [B, C_out, l_out]
    if squeeze:
        out_data = out_data[0]
    out = _make(np.ascontiguousarray(out_data), (x, w), None)
    if out.requires_grad:
        def _bw():
            g = out.grad[None] if squeeze else out.grad        # [B, C_out, l_out]
            gt = np.ascontiguousarray(g.transpose(0, 2, 1))     # [B, l_out, C_out]
            if w.requires_grad:
                gw = np.matmul(
                    gt.reshape(B * l_out, c_out).T,
                    patches.reshape(B * l_out, c_in * K),
                )
                w._accumulate(gw.reshape(c_out, c_in, K))
            if x.requires_grad:
                gp = np.matmul(gt, w_flat).reshape(B, l_out, c_in, K)
                gx = np.zeros_like(xd)
                for k in range(K):
                    gx[:, :, k:k + stride * l_out:stride] += gp[:, :, :, k].transpose(0, 2, 1)
                x._accumulate(gx[0] if squeeze else gx)
        _wrap_backward(out, _bw)
    return out


def conv1d_out_len(length: int, kernel: int, stride: int) -> int:
    """Closed-form valid-conv output length."""
    if length < kernel:
        raise ShapeError(f"input length {length} shorter than kernel {kernel}")
    if stride < 1:
        raise ValueError(f"stride must be a positive int, got {stride}")
    return (length - kernel) // stride + 1


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _make(xhat * gain.data + bias.data, (x, gain, bias), None)
    if out.requires_grad:
        def _bw():
            g = out.grad
            if bias.requires_grad:
                bias._accumulate(_reduce_to(g, bias.shape))
            if gain.requires_grad:
                gain._accumulate(_reduce_to(g * xhat, gain.shape))
            if x.requires_grad:
                d = x.shape[-1]
                gx_hat = g * gain.data
                gx = inv * (
                    gx_hat
                    - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
                )
                x._accumulate(gx.astype(x.data.dtype))
        _wrap_backward(out, _bw)
    return out


def softmax(x, axis=-1):
    """Stable softmax: slices along `axis` sum to 1."""
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _make(s, (x,), None)
    if out.requires_grad:
        def _bw():
            g = out.grad
            dot = (g * s).sum(axis=axis, keepdims=True)
            x._accumulate((s * (g - dot)).astype(x.data.dtype))
        _wrap_backward(out, _bw)
    return out


def log_softmax(x, axis=-1):
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    logp = shifted - lse
    out = _make(logp, (x,), None)
    if out.requires_grad:
        def _bw():
            g = out.grad
            p = np.exp(logp)
            x._accumulate((g - p * g.sum(axis=axis, keepdims=True)).astype(x.data.dtype))
        _wrap_backward(out, _bw)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh-approximation GELU."""
    # x**n on float32 is far slower than explicit multiplies; this runs on
    # every conv activation, so it is written allocation-consciously.
    xd = x.data
    x2 = xd * xd
    u = _GELU_C * xd
    u *= 1.0 + 0.044715 * x2
    t = np.tanh(u)
    out = _make(0.5 * xd * (1.0 + t), (x,), None)
    if out.requires_grad:
        def _bw():
            du = _GELU_C * (1.0 + 0.134145 * x2)
            d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du
            x._accumulate((out.grad * d).astype(xd.dtype))
        _wrap_backward(out, _bw)
    return out


def embedding(table, ids):
    """Gather rows of `table` ([V, d]) at integer `ids` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    out = _make(table.data[ids], (table,), None)
    if out.requires_grad:
        def _bw():
            g = np.zeros_like(table.data)
            np.add.at(g, ids, out.grad)
            table._accumulate(g)
        _wrap_backward(out, _bw)
    return out


def rotate_pairs(x, positions, base=10000.0, rot_dims=None):
    """Rotate dimension pairs (2i, 2i+1) of the last axis by angle m*theta_i.

    theta_i = base^(-2i/d); m comes from `positions`, one per entry of the
    second-to-last axis. Dims at or beyond `rot_dims` pass through. The map
    is orthogonal, so the backward pass is a rotation by the negated angle.
    """
    d = x.shape[-1]
    if d % 2 != 0:
        raise ValueError(f"rotary needs an even last dim, got {d}")
    rd = d if rot_dims is None else rot_dims
    if rd % 2 != 0:
        raise ValueError(f"rotary rot_dims must be even, got {rot_dims}")
    positions = np.asarray(positions, dtype=np.float64)
    half = rd // 2
    theta = base ** (-2.0 * np.arange(half) / d)
    ang = positions[:, None] * theta[None, :]           # [T, half]
    cos = np.cos(ang).astype(x.data.dtype)
    sin = np.sin(ang).astype(x.data.dtype)

    def _rotate(arr, cos_t, sin_t):
        out_arr = arr.copy()
        ev = arr[..., 0:rd:2]
        od = arr[..., 1:rd:2]
        out_arr[..., 0:rd:2] = ev * cos_t - od * sin_t
        out_arr[..., 1:rd:2] = ev * sin_t + od * cos_t
        return out_arr

    out = _make(_rotate(x.data, cos, sin), (x,), None)
    if out.requires_grad:
        def _bw():
            x._accumulate(_rotate(out.grad, cos, -sin))
        _wrap_backward(out, _bw)
    return out
