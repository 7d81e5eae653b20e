"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Provides exactly the operators the neural models need (dense, conv1d,
batchnorm, pooling, GRU, the losses) plus the Adam optimizer and a binary
checkpoint format.  Everything is CPU numpy; tensors are row-major float64.

The recurrent and convolution operators are "fused": a single graph node
with a hand-written backward pass, so graphs stay small and the Python
overhead of long sequences is paid once per layer, not once per time step
per primitive.

Gate convention for the GRU (fixed for reproducibility):
    z = sigmoid(x Wz + h Uz + bz)
    r = sigmoid(x Wr + h Ur + br)
    c = tanh(x Wc + (r * h) Uc + bc)
    h' = (1 - z) * h + z * c
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateBatch,
    EmptyBatch,
    EvenKernel,
    NonFiniteValue,
    ShapeMismatch,
    WindowTooLarge,
)

_CHECK_FINITE = False
_GRAD_ENABLED = True

# kernels at least this long go through the FFT convolution path
_FFT_KERNEL_MIN = 32


def set_check_finite(enabled: bool) -> None:
    """Toggle the per-op NaN/Inf diagnostic (off by default for speed)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


@contextmanager
def no_grad():
    """Suppress graph construction inside the block (pure inference)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """A float64 array with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        if _CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise NonFiniteValue("non-finite value produced in forward pass")

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        """Reverse-accumulate gradients from this scalar root."""
        if self.data.size != 1:
            raise ShapeMismatch("backward() requires a scalar root")
        topo: list[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # free intermediate grads/closures, keep leaves
                if node._parents:
                    node.grad = None
                    node._backward = None
                    node._parents = ()

    # --- operator sugar (constants are wrapped, never differentiated) ---
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, _const(-1.0))


def tensor(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _const(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data, parents, backward) -> Tensor:
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


# --- elementwise and reduction primitives -----------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))
    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))
    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))
    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
    return _make(a.data / b.data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def backward(g):
        _accumulate(a, g * (a.data > 0.0))
    return _make(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def backward(g):
        _accumulate(a, g * out * (1.0 - out))
    return _make(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out * out))
    return _make(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out)
    return _make(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g / a.data)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * 0.5 / out)
    return _make(out, (a,), backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g * 2.0 * a.data)
    return _make(a.data * a.data, (a,), backward)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg, a.data.shape))
    return _make(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), _const(1.0 / n))


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))
    return _make(a.data.reshape(shape), (a,), backward)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def backward(g):
        _accumulate(a, np.swapaxes(g, ax1, ax2))
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)
    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tensors, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul {a.data.shape} @ {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)
    return _make(a.data @ b.data, (a, b), backward)


# --- neural-network operators -----------------------------------------------

def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x W (+ b). Leading axes of x are flattened into the batch."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeMismatch(f"dense: {x.data.shape} @ {w.data.shape}")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, x.data.shape[-1])
    out = x2 @ w.data
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise ShapeMismatch(f"dense bias {b.data.shape} vs {w.data.shape}")
        out = out + b.data
    out = out.reshape(*lead, w.data.shape[1])

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            _accumulate(x, (g2 @ w.data.T).reshape(x.data.shape))
        if w.requires_grad:
            _accumulate(w, x2.T @ g2)
        if b is not None and b.requires_grad:
            _accumulate(b, g2.sum(axis=0))
    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def _conv1d_direct(x, k, p):
    xp = np.pad(x, ((0, 0), (0, 0), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, k.shape[2], axis=2)
    return np.einsum("nctk,ock->not", win, k, optimize=True), xp


def _conv1d_fft_sizes(T, k):
    import scipy.fft
    return scipy.fft.next_fast_len(T + 2 * ((k - 1) // 2) + k - 1)


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation with zero same-padding, stride 1.

    x: [N, c_in, T], kernels: [c_out, c_in, k] with k odd -> [N, c_out, T].
    Long kernels are evaluated via FFT; short ones directly.  Both paths
    compute the identical sum, only the algorithm differs.
    """
    if x.data.ndim != 3 or kernels.data.ndim != 3:
        raise ShapeMismatch("conv1d expects [N,c_in,T] and [c_out,c_in,k]")
    n, c_in, t_len = x.data.shape
    c_out, c_in_k, k = kernels.data.shape
    if c_in != c_in_k:
        raise ShapeMismatch(f"conv1d channels {c_in} vs {c_in_k}")
    if k % 2 == 0:
        raise EvenKernel(f"kernel length {k} is even")
    if bias is not None and bias.data.shape != (c_out,):
        raise ShapeMismatch("conv1d bias shape")
    p = (k - 1) // 2
    use_fft = k >= _FFT_KERNEL_MIN

    if use_fft:
        L = _conv1d_fft_sizes(t_len, k)
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p)))
        xf = np.fft.rfft(xp, L, axis=2)
        kf_rev = np.fft.rfft(kernels.data[:, :, ::-1], L, axis=2)
        yf = np.einsum("ncf,ocf->nof", xf, kf_rev, optimize=True)
        out = np.fft.irfft(yf, L, axis=2)[:, :, k - 1:k - 1 + t_len]
    else:
        out, xp = _conv1d_direct(x.data, kernels.data, p)
        xf = None
    if bias is not None:
        out = out + bias.data[None, :, None]

    def backward(g):
        if use_fft:
            gf = np.fft.rfft(g, L, axis=2)
            if kernels.requires_grad:
                dkf = np.einsum("ncf,nof->ocf", xf, np.conj(gf), optimize=True)
                dk = np.fft.irfft(dkf, L, axis=2)[:, :, :k]
                _accumulate(kernels, dk)
            if x.requires_grad:
                kf = np.fft.rfft(kernels.data, L, axis=2)
                dxf = np.einsum("ocf,nof->ncf", kf, gf, optimize=True)
                dxp = np.fft.irfft(dxf, L, axis=2)
                _accumulate(x, dxp[:, :, p:p + t_len])
        else:
            win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)
            if kernels.requires_grad:
                _accumulate(kernels,
                            np.einsum("nctk,not->ock", win, g, optimize=True))
            if x.requires_grad:
                gp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1)))
                gwin = np.lib.stride_tricks.sliding_window_view(gp, k, axis=2)
                kflip = kernels.data[:, :, ::-1]
                dxp = np.einsum("notk,ock->nct", gwin, kflip, optimize=True)
                _accumulate(x, dxp[:, :, p:p + t_len])
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2)))

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _make(out, parents, backward)


@dataclass
class BatchNormState:
    """Per-channel running statistics, updated in train mode."""
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9

    @classmethod
    def for_channels(cls, c: int, momentum: float = 0.9) -> "BatchNormState":
        return cls(np.zeros(c), np.ones(c), momentum)


_BN_EPS = 1e-5


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor,
                state: BatchNormState, train: bool) -> Tensor:
    """Per-channel normalization of [N, c, T] over the (N, T) axes.

    Zero-variance channels are tolerated (the eps inside the square root
    keeps the output finite); DegenerateBatch is reserved for batches with
    fewer than two values per channel.
    """
    if x.data.ndim != 3:
        raise ShapeMismatch("batchnorm1d expects [N,c,T]")
    n, c, t_len = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeMismatch("batchnorm1d parameter shapes")
    m = n * t_len
    if train:
        if m < 2:
            raise DegenerateBatch("need at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        state.mean = state.momentum * state.mean + (1 - state.momentum) * mean
        state.var = state.momentum * state.var + (1 - state.momentum) * var
    else:
        mean = state.mean
        var = state.var
    inv = 1.0 / np.sqrt(var + _BN_EPS)
    xhat = (x.data - mean[None, :, None]) * inv[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2)))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2)))
        if x.requires_grad:
            gx = g * gamma.data[None, :, None]
            if train:
                s1 = gx.sum(axis=(0, 2))
                s2 = (gx * xhat).sum(axis=(0, 2))
                dx = (gx - (s1[None, :, None] + xhat * s2[None, :, None]) / m) \
                    * inv[None, :, None]
            else:
                dx = gx * inv[None, :, None]
            _accumulate(x, dx)
    return _make(out, (x, gamma, beta), backward)


def avgpool1d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Mean over sliding windows along the last axis of [N, c, T]."""
    if x.data.ndim != 3:
        raise ShapeMismatch("avgpool1d expects [N,c,T]")
    stride = window if stride is None else stride
    n, c, t_len = x.data.shape
    if window > t_len:
        raise WindowTooLarge(f"window {window} > length {t_len}")
    lo = (t_len - window) // stride + 1
    if window == stride:
        trimmed = x.data[:, :, :lo * window]
        out = trimmed.reshape(n, c, lo, window).mean(axis=3)
    else:
        cs = np.cumsum(np.pad(x.data, ((0, 0), (0, 0), (1, 0))), axis=2)
        starts = np.arange(lo) * stride
        out = (cs[:, :, starts + window] - cs[:, :, starts]) / window

    def backward(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        if window == stride:
            dx[:, :, :lo * window] = np.repeat(g / window, window, axis=2)
        else:
            for i in range(lo):
                dx[:, :, i * stride:i * stride + window] += \
                    g[:, :, i:i + 1] / window
        _accumulate(x, dx)
    return _make(out, (x,), backward)


def moving_average_same(x: Tensor, window: int) -> Tensor:
    """Centered moving average along axis 1 of [N, T, C], replicate-padded.

    Same output length; window 1 is the identity.
    """
    if x.data.ndim != 3:
        raise ShapeMismatch("moving_average_same expects [N,T,C]")
    if window < 1:
        raise WindowTooLarge("window must be >= 1")
    if window == 1:
        def backward1(g):
            _accumulate(x, g)
        return _make(x.data.copy(), (x,), backward1)
    n, t_len, c = x.data.shape
    pl = (window - 1) // 2
    pr = window // 2
    xp = np.concatenate(
        [np.repeat(x.data[:, :1, :], pl, axis=1), x.data,
         np.repeat(x.data[:, -1:, :], pr, axis=1)], axis=1)
    cs = np.cumsum(np.pad(xp, ((0, 0), (1, 0), (0, 0))), axis=1)
    out = (cs[:, window:, :] - cs[:, :-window, :]) / window

    def backward(g):
        if not x.requires_grad:
            return
        # gradient w.r.t. padded input is a zero-padded moving sum of g
        gp = np.pad(g, ((0, 0), (window - 1, window - 1), (0, 0)))
        gcs = np.cumsum(np.pad(gp, ((0, 0), (1, 0), (0, 0))), axis=1)
        dxp = (gcs[:, window:, :] - gcs[:, :-window, :]) / window
        dx = dxp[:, pl:pl + t_len, :].copy()
        if pl:
            dx[:, 0, :] += dxp[:, :pl, :].sum(axis=1)
        if pr:
            dx[:, -1, :] += dxp[:, pl + t_len:, :].sum(axis=1)
        _accumulate(x, dx)
    return _make(out, (x,), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat each time step of [N, T, C] `factor` times along axis 1."""
    if x.data.ndim != 3:
        raise ShapeMismatch("upsample_nearest expects [N,T,C]")
    out = np.repeat(x.data, factor, axis=1)

    def backward(g):
        if not x.requires_grad:
            return
        n, t_len, c = x.data.shape
        _accumulate(x, g.reshape(n, t_len, factor, c).sum(axis=2))
    return _make(out, (x,), backward)


@dataclass
class GruParams:
    """One GRU layer's parameters; gate order along columns is (z, r, c)."""
    w: Tensor   # (in_dim, 3h)
    u: Tensor   # (h, 3h)
    b: Tensor   # (3h,)

    @property
    def hidden(self) -> int:
        return self.u.data.shape[0]


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def gru_layer(x: Tensor, params: GruParams) -> Tensor:
    """Full-sequence GRU: [N, T, a] -> [N, T, h], zero initial state.

    The time loops work on preallocated buffers with in-place numpy calls;
    at small widths the per-step Python overhead, not the FLOPs, dominates.
    """
    if x.data.ndim != 3:
        raise ShapeMismatch("gru_layer expects [N,T,a]")
    n, t_len, a = x.data.shape
    h = params.hidden
    w, u, b = params.w, params.u, params.b
    if w.data.shape != (a, 3 * h) or u.data.shape != (h, 3 * h) \
            or b.data.shape != (3 * h,):
        raise ShapeMismatch("gru parameter shapes")
    u_zr = np.ascontiguousarray(u.data[:, :2 * h])
    u_c = np.ascontiguousarray(u.data[:, 2 * h:])

    x2 = x.data.reshape(n * t_len, a)
    xp = (x2 @ w.data + b.data).reshape(n, t_len, 3 * h).transpose(1, 0, 2)
    xzr = np.ascontiguousarray(xp[:, :, :2 * h])      # (T, N, 2h)
    xc = np.ascontiguousarray(xp[:, :, 2 * h:])       # (T, N, h)
    del xp

    hs = np.empty((t_len + 1, n, h))
    hs[0] = 0.0
    zrs = np.empty((t_len, n, 2 * h))   # post-sigmoid gates
    cs = np.empty((t_len, n, h))        # post-tanh candidates
    rhs = np.empty((t_len, n, h))       # r * h_prev (reused in backward)
    for t in range(t_len):
        hp = hs[t]
        zr = zrs[t]
        np.dot(hp, u_zr, out=zr)
        zr += xzr[t]
        np.negative(zr, out=zr)
        np.exp(zr, out=zr)
        zr += 1.0
        np.reciprocal(zr, out=zr)
        z = zr[:, :h]
        r = zr[:, h:]
        c = cs[t]
        np.multiply(r, hp, out=rhs[t])
        np.dot(rhs[t], u_c, out=c)
        c += xc[t]
        np.tanh(c, out=c)
        hn = hs[t + 1]
        np.subtract(c, hp, out=hn)
        hn *= z
        hn += hp
    out = np.ascontiguousarray(hs[1:].transpose(1, 0, 2))

    def backward(g):
        gt = g.transpose(1, 0, 2)                     # (T, N, h) view
        u_zr_t = np.ascontiguousarray(u_zr.T)
        u_c_t = np.ascontiguousarray(u_c.T)
        dzr = np.empty((t_len, n, 2 * h))             # gate pre-activations
        dpc_all = np.empty((t_len, n, h))             # tanh pre-activation
        dh = np.zeros((n, h))
        dht = np.empty((n, h))
        dc = np.empty((n, h))
        dhp = np.empty((n, h))
        drh = np.empty((n, h))
        tmp = np.empty((n, h))
        for t in range(t_len - 1, -1, -1):
            np.add(gt[t], dh, out=dht)
            hp = hs[t]
            zr = zrs[t]
            z = zr[:, :h]
            r = zr[:, h:]
            c = cs[t]
            np.multiply(dht, z, out=dc)               # dL/dc
            np.subtract(dht, dc, out=dhp)             # direct dL/dh_prev
            dpc = dpc_all[t]
            np.multiply(c, c, out=dpc)
            np.subtract(1.0, dpc, out=dpc)
            dpc *= dc
            np.dot(dpc, u_c_t, out=drh)               # dL/d(r*h_prev)
            np.multiply(drh, r, out=tmp)
            dhp += tmp
            dzr_t = dzr[t]
            dz = dzr_t[:, :h]
            np.subtract(c, hp, out=dz)
            dz *= dht
            np.subtract(1.0, z, out=tmp)              # sigmoid derivative
            tmp *= z
            dz *= tmp
            dr = dzr_t[:, h:]
            np.multiply(drh, hp, out=dr)
            np.subtract(1.0, r, out=tmp)
            tmp *= r
            dr *= tmp
            np.dot(dzr_t, u_zr_t, out=dh)
            dh += dhp
        if u.requires_grad:
            hprev = hs[:-1].reshape(t_len * n, h)
            du = np.empty_like(u.data)
            du[:, :2 * h] = hprev.T @ dzr.reshape(t_len * n, 2 * h)
            du[:, 2 * h:] = rhs.reshape(t_len * n, h).T @ \
                dpc_all.reshape(t_len * n, h)
            _accumulate(u, du)
        need_b = b.requires_grad
        need_w = w.requires_grad
        need_x = x.requires_grad
        if need_b or need_w or need_x:
            dxp_nt = np.concatenate(
                [dzr.transpose(1, 0, 2), dpc_all.transpose(1, 0, 2)],
                axis=2).reshape(n * t_len, 3 * h)
            if need_b:
                _accumulate(b, dxp_nt.sum(axis=0))
            if need_w:
                _accumulate(w, x2.T @ dxp_nt)
            if need_x:
                _accumulate(x, (dxp_nt @ w.data.T).reshape(n, t_len, a))
    return _make(out, (x, w, u, b), backward)


# --- losses -----------------------------------------------------------------

def mse_per_step(pred: Tensor, target: Tensor) -> Tensor:
    """Reconstruction loss: per-time-step Euclidean norm over channels,
    summed over time, averaged over the batch.  Shapes [N, d, T]."""
    if pred.data.shape != target.data.shape:
        raise ShapeMismatch(f"{pred.data.shape} vs {target.data.shape}")
    if pred.data.ndim != 3:
        raise ShapeMismatch("mse_per_step expects [N,d,T]")
    n = pred.data.shape[0]
    if n == 0:
        raise EmptyBatch("empty batch in mse_per_step")
    diff = pred.data - target.data
    norms = np.sqrt((diff * diff).sum(axis=1))    # (N, T)
    out = norms.sum(axis=1).mean()

    def backward(g):
        safe = np.where(norms > 0.0, norms, 1.0)
        d = g * diff / safe[:, None, :] / n
        d[np.broadcast_to((norms == 0.0)[:, None, :], d.shape)] = 0.0
        if pred.requires_grad:
            _accumulate(pred, d)
        if target.requires_grad:
            _accumulate(target, -d)
    return _make(out, (pred, target), backward)


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax of [N, K]."""
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        if logits.requires_grad:
            dot = (g * p).sum(axis=1, keepdims=True)
            _accumulate(logits, p * (g - dot))
    return _make(p, (logits,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of [N, K] logits against integer class labels."""
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if n == 0:
        raise EmptyBatch("empty batch in cross entropy")
    if labels.shape != (n,):
        raise ShapeMismatch(f"labels {labels.shape} for logits {logits.data.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    out = (lse - z[np.arange(n), labels]).mean()

    def backward(g):
        if logits.requires_grad:
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), labels] -= 1.0
            _accumulate(logits, g * p / n)
    return _make(out, (logits,), backward)


def composite_loss(recon: Tensor, reg: Tensor, lam: float) -> Tensor:
    """Joint objective: reconstruction plus lam * regularization."""
    if lam == 0.0:
        return recon
    return add(recon, mul(reg, _const(lam)))


# --- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam with per-parameter moment buffers."""
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor],
              grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """One Adam update in place; missing gradients are treated as zero."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"grad shape for {name}: {g.shape} vs {p.data.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / corr1
        vhat = v / corr2
        p.data -= state.learning_rate * mhat / (np.sqrt(vhat) + state.eps)
    return params


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.grad for k, p in params.items() if p.grad is not None}


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# --- initialization ---------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_dense(rng, a, b):
    return parameter(glorot_uniform(rng, (a, b), a, b)), parameter(np.zeros(b))


def init_conv(rng, c_out, c_in, k):
    fan_in = c_in * k
    return (parameter(glorot_uniform(rng, (c_out, c_in, k), fan_in, c_out * k)),
            parameter(np.zeros(c_out)))


def init_gru(rng, a, h) -> GruParams:
    scale_w = np.sqrt(6.0 / (a + h))
    scale_u = np.sqrt(3.0 / h)
    return GruParams(
        w=parameter(rng.uniform(-scale_w, scale_w, size=(a, 3 * h))),
        u=parameter(rng.uniform(-scale_u, scale_u, size=(h, 3 * h))),
        b=parameter(np.zeros(3 * h)),
    )


# --- checkpoints ------------------------------------------------------------

_CKPT_MAGIC = b"SOMNCKPT"
_CKPT_VERSION = 1


def save_checkpoint(path, named: dict[str, np.ndarray]) -> None:
    """Binary checkpoint: magic, version, then named float64 LE tensors."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        f.write(struct.pack("<I", len(named)))
        for name, arr in named.items():
            arr = np.asarray(arr, dtype="<f8")
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<q", dim))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(8) != _CKPT_MAGIC:
            raise ValueError("not a somnium checkpoint")
        version, = struct.unpack("<I", f.read(4))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        count, = struct.unpack("<I", f.read(4))
        named = {}
        for _ in range(count):
            nlen, = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            ndim, = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<q", f.read(8))[0] for _ in range(ndim))
            n_items = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(8 * n_items), dtype="<f8").reshape(shape)
            named[name] = arr.astype(np.float64)
        return named
