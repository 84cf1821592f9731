"""Minimal reverse-mode differentiable compute engine on numpy arrays.

Every operation records a backward closure on the produced tensor; calling
``backward`` on a scalar output walks the recorded graph in reverse topological
order and accumulates gradients into each tensor's ``grad`` array. Graphs are
rebuilt on every forward pass. All arithmetic is float64.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

log = logging.getLogger(__name__)

CE_CLAMP = 1e-12


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class GraphStateError(RuntimeError):
    pass


class NonFiniteError(RuntimeError):
    pass


class DiffTensor:
    """An n-d value array paired with a same-shape gradient array.

    The gradient buffer is materialized lazily: a tensor that never received a
    gradient reads as all zeros. Backward closures accumulate via ``_acc``.
    """

    __slots__ = ("values", "_grad", "_parents", "_backward")

    def __init__(self, values, parents=(), backward_fn=None):
        self.values = np.asarray(values, dtype=np.float64)
        self._grad = None
        self._parents = tuple(parents)
        self._backward = backward_fn

    @property
    def shape(self):
        return self.values.shape

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = g

    def zero_grad(self):
        self._grad = None

    def _acc(self, g, own=False):
        """Accumulate a gradient contribution; ``own`` marks a caller-owned
        temporary that may be adopted without copying."""
        if self._grad is None:
            self._grad = g if own else g.copy()
        else:
            self._grad += g

    def __repr__(self):
        return f"DiffTensor(shape={self.values.shape})"


def tensor(values) -> DiffTensor:
    """Wrap an array as a leaf tensor (parameter or constant input)."""
    return DiffTensor(np.array(values, dtype=np.float64))


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    out = DiffTensor(a.values + b.values, (a, b))

    def back():
        a._acc(out.grad)
        b._acc(out.grad)

    out._backward = back
    return out


def sub(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    out = DiffTensor(a.values - b.values, (a, b))

    def back():
        a._acc(out.grad)
        b._acc(-out.grad, own=True)

    out._backward = back
    return out


def mul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    out = DiffTensor(a.values * b.values, (a, b))

    def back():
        a._acc(out.grad * b.values, own=True)
        b._acc(out.grad * a.values, own=True)

    out._backward = back
    return out


def scale(a: DiffTensor, c: float) -> DiffTensor:
    out = DiffTensor(a.values * c, (a,))

    def back():
        a._acc(out.grad * c, own=True)

    out._backward = back
    return out


def relu(x: DiffTensor) -> DiffTensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is taken as 0."""
    out = DiffTensor(np.maximum(x.values, 0.0), (x,))
    mask = x.values > 0.0

    def back():
        x._acc(out.grad * mask, own=True)

    out._backward = back
    return out


def reshape(x: DiffTensor, shape) -> DiffTensor:
    out = DiffTensor(x.values.reshape(shape), (x,))

    def back():
        x._acc(out.grad.reshape(x.shape))

    out._backward = back
    return out


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = DiffTensor(a.values @ b.values, (a, b))

    def back():
        a._acc(out.grad @ b.values.T, own=True)
        b._acc(a.values.T @ out.grad, own=True)

    out._backward = back
    return out


def add_rows(a: DiffTensor, bias: DiffTensor) -> DiffTensor:
    """Broadcast-add a length-M bias to every row of an [N, M] matrix."""
    if a.values.ndim != 2 or bias.shape != (a.shape[1],):
        raise ShapeError(f"add_rows: {a.shape} + {bias.shape}")
    out = DiffTensor(a.values + bias.values[None, :], (a, bias))

    def back():
        a._acc(out.grad)
        bias._acc(out.grad.sum(axis=0), own=True)

    out._backward = back
    return out


def dense(x: DiffTensor, w: DiffTensor, bias: DiffTensor, activation=None) -> DiffTensor:
    """Fused affine layer out = act(x @ w + bias) for [N, K] batches."""
    if x.values.ndim != 2 or x.shape[1] != w.shape[0] or bias.shape != (w.shape[1],):
        raise ShapeError(f"dense: {x.shape} @ {w.shape} + {bias.shape}")
    if activation not in (None, "relu"):
        raise ConfigError(f"unknown activation {activation!r}")
    z = x.values @ w.values + bias.values[None, :]
    out_vals = np.maximum(z, 0.0) if activation == "relu" else z
    out = DiffTensor(out_vals, (x, w, bias))

    def back():
        gz = out.grad * (z > 0.0) if activation == "relu" else out.grad
        w._acc(x.values.T @ gz, own=True)
        bias._acc(gz.sum(axis=0), own=True)
        x._acc(gz @ w.values.T, own=True)

    out._backward = back
    return out


def channel_concat(parts) -> DiffTensor:
    """Stack [Ci, H, W] maps along the channel axis, in argument order."""
    parts = list(parts)
    if not parts:
        raise ShapeError("channel_concat: empty input list")
    hw = parts[0].shape[1:]
    for p in parts:
        if p.values.ndim != 3 or p.shape[1:] != hw:
            raise ShapeError(f"channel_concat: spatial mismatch {p.shape} vs {hw}")
    out = DiffTensor(np.concatenate([p.values for p in parts], axis=0), tuple(parts))
    sizes = [p.shape[0] for p in parts]

    def back():
        at = 0
        for p, c in zip(parts, sizes):
            p._acc(out.grad[at:at + c])
            at += c

    out._backward = back
    return out


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvKernel:
    """Square dilated convolution kernel with same-padding semantics.

    Kernel extent is 2r+1 with r in {0, 1}; dilation q >= 1 and q == 1 when
    r == 0 (a 1x1 kernel has nothing to dilate).
    """

    out_channels: int
    in_channels: int
    radius: int
    dilation: int
    weights: DiffTensor
    bias: DiffTensor

    def __post_init__(self):
        if self.radius not in (0, 1):
            raise ConfigError(f"kernel radius must be 0 or 1, got {self.radius}")
        if self.dilation < 1:
            raise ConfigError(f"dilation must be >= 1, got {self.dilation}")
        if self.radius == 0 and self.dilation != 1:
            raise ConfigError("1x1 kernels require dilation 1")
        k = 2 * self.radius + 1
        expect = (self.out_channels, self.in_channels, k, k)
        if self.weights.shape != expect:
            raise ShapeError(f"kernel weights {self.weights.shape}, expected {expect}")
        if self.bias.shape != (self.out_channels,):
            raise ShapeError(f"kernel bias {self.bias.shape}, expected ({self.out_channels},)")


def make_kernel(out_channels, in_channels, radius, dilation, rng) -> ConvKernel:
    """He-uniform initialized kernel with zero bias."""
    k = 2 * radius + 1
    fan_in = in_channels * k * k
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(out_channels, in_channels, k, k))
    return ConvKernel(out_channels, in_channels, radius, dilation,
                      tensor(w), tensor(np.zeros(out_channels)))


@njit(cache=True, fastmath=True)
def _conv3x3_fwd_flat(xflat, w9, bias, acc, starts, n):
    Co, C = w9.shape[0], w9.shape[1]
    for o in range(Co):
        row = acc[o]
        row[:] = bias[o]
        for c in range(C):
            xr = xflat[c]
            for t in range(9):
                s = starts[t]
                row += w9[o, c, t] * xr[s:s + n]


@njit(cache=True, fastmath=True)
def _conv3x3_scatter_flat(dcol, dxflat, starts, n):
    C = dxflat.shape[0]
    for c in range(C):
        dxr = dxflat[c]
        for t in range(9):
            s = starts[t]
            dxr[s:s + n] += dcol[c * 9 + t]


def dilated_conv2d(x: DiffTensor, kernel: ConvKernel, activation=None) -> DiffTensor:
    """Dilated convolution with stride 1, zero same-padding, optional fused relu.

    out[o, y, x] = bias[o] + sum_{c,i,j} in[c, y - q*i, x - q*j] * W[o, c, i+r, j+r]
    with i, j in [-r, r]; out-of-range input samples contribute zero.

    The 3x3 path works on a flattened padded image so that every kernel tap is
    one long contiguous slice: the forward accumulates taps in a compiled
    kernel, the backward runs one small GEMM per tap on the same slices.
    """
    C, H, W = x.values.shape if x.values.ndim == 3 else (None, None, None)
    if C is None or C != kernel.in_channels:
        raise ShapeError(
            f"conv input {x.values.shape} does not match kernel in_channels {kernel.in_channels}")
    if activation not in (None, "relu"):
        raise ConfigError(f"unknown activation {activation!r}")
    r, q = kernel.radius, kernel.dilation
    Co = kernel.out_channels
    wv = kernel.weights.values

    if r == 0:
        xflat = x.values.reshape(C, H * W)
        pre = (wv.reshape(Co, C) @ xflat).reshape(Co, H, W) \
            + kernel.bias.values[:, None, None]
        out_vals = np.maximum(pre, 0.0) if activation == "relu" else pre
        taps = starts = None
        n = Wp = 0
    else:
        Wp = W + 2 * q
        n = H * Wp
        # one spare padded row keeps every tap's contiguous slice in bounds
        xpad = np.zeros((C, H + 2 * q + 1, Wp))
        xpad[:, q:q + H, q:q + W] = x.values
        xflat = xpad.reshape(C, -1)
        starts = np.array([(q - q * i) * Wp + (q - q * j)
                           for i in (-1, 0, 1) for j in (-1, 0, 1)], dtype=np.int64)
        taps = np.ascontiguousarray(wv.reshape(Co, C, 9))
        acc = np.empty((Co, n))
        _conv3x3_fwd_flat(xflat, taps, kernel.bias.values, acc, starts, n)
        pre = acc.reshape(Co, H, Wp)[:, :, :W]
        out_vals = np.maximum(pre, 0.0) if activation == "relu" else pre.copy()
    mask = out_vals > 0.0 if activation == "relu" else None
    out = DiffTensor(out_vals, (x, kernel.weights, kernel.bias))

    def back():
        g3 = out.grad * mask if mask is not None else out.grad
        if r == 0:
            g = g3.reshape(Co, H * W)
            kernel.bias._acc(g.sum(axis=1), own=True)
            kernel.weights._acc((g @ xflat.T).reshape(wv.shape), own=True)
            x._acc((wv.reshape(Co, C).T @ g).reshape(C, H, W), own=True)
        else:
            kernel.bias._acc(g3.sum(axis=(1, 2)), own=True)
            gpad = np.zeros((Co, H, Wp))
            gpad[:, :, :W] = g3
            gflat = gpad.reshape(Co, -1)
            dw = np.empty((Co, C, 9))
            for t in range(9):
                s = int(starts[t])
                np.matmul(gflat, xflat[:, s:s + n].T, out=dw[:, :, t])
            kernel.weights._acc(dw.reshape(wv.shape), own=True)
            dcol = taps.reshape(Co, C * 9).T @ gflat
            dxflat = np.zeros_like(xflat)
            _conv3x3_scatter_flat(dcol, dxflat, starts, n)
            dxp = dxflat.reshape(C, H + 2 * q + 1, Wp)
            x._acc(dxp[:, q:q + H, q:q + W], own=True)

    out._backward = back
    return out


# ---------------------------------------------------------------------------
# classification head ops


def softmax_channels(x: DiffTensor) -> DiffTensor:
    """Per-pixel softmax over the leading (label) axis of an [L, H, W] tensor."""
    if x.values.shape[0] < 2:
        raise ShapeError("softmax_channels needs at least 2 channels")
    shifted = x.values - x.values.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    out_vals = e / e.sum(axis=0, keepdims=True)
    out = DiffTensor(out_vals, (x,))

    def back():
        dot = (out.grad * out_vals).sum(axis=0, keepdims=True)
        x._acc(out_vals * (out.grad - dot), own=True)

    out._backward = back
    return out


def cross_entropy_loss(q: DiffTensor, labels) -> DiffTensor:
    """Mean over pixels of -log q[label]; probabilities clamped at 1e-12.

    q is an [L, H, W] probability field; labels an integer [H, W] mask.
    """
    labels = np.asarray(labels)
    L = q.shape[0]
    if labels.shape != q.shape[1:]:
        raise ShapeError(f"labels {labels.shape} vs field {q.shape[1:]}")
    if labels.min() < 0 or labels.max() >= L:
        raise ShapeError(f"labels outside [0, {L})")
    n = labels.size
    flat = q.values.reshape(L, n)
    lab = labels.ravel()
    picked = flat[lab, np.arange(n)]
    clamped = picked < CE_CLAMP
    if clamped.any():
        log.warning("cross_entropy_loss: clamped %d zero probabilities", int(clamped.sum()))
    safe = np.maximum(picked, CE_CLAMP)
    out = DiffTensor(-np.log(safe).mean(), (q,))

    def back():
        g = np.zeros((L, n))
        live = ~clamped
        cols = np.arange(n)[live]
        g[lab[live], cols] = -float(out.grad) / (safe[live] * n)
        q._acc(g.reshape(q.shape), own=True)

    out._backward = back
    return out


def sum_all(x: DiffTensor) -> DiffTensor:
    """Scalar sum of all elements."""
    out = DiffTensor(x.values.sum(), (x,))

    def back():
        x._acc(np.full(x.shape, float(out.grad)), own=True)

    out._backward = back
    return out


def mse_loss(pred: DiffTensor, target) -> DiffTensor:
    """Mean squared error against a constant target array."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeError(f"mse: {pred.shape} vs {target.shape}")
    diff = pred.values - target
    out = DiffTensor(np.mean(diff * diff), (pred,))

    def back():
        pred._acc(float(out.grad) * 2.0 / diff.size * diff, own=True)

    out._backward = back
    return out


# ---------------------------------------------------------------------------
# backward driver


def backward(out: DiffTensor):
    """Reverse-mode sweep from a scalar output node.

    Gradients accumulate into every reachable tensor's ``grad``; parameter
    grads must be zeroed by the caller between steps.
    """
    if out.values.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {out.shape}")
    if out._backward is None and not out._parents:
        raise GraphStateError("backward called before any recorded forward pass")

    topo = []
    visited = set()
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    out.grad[...] = 1.0
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


# ---------------------------------------------------------------------------
# SGD with momentum, weight decay, and stepwise lr halving


@dataclass
class SgdConfig:
    learning_rate: float
    momentum: float = 0.99
    weight_decay: float = 5e-4
    lr_halving_period_iters: int = 5000
    minibatch: int = 1

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0 or self.momentum < 0:
            raise ConfigError("sgd parameters must be nonnegative")
        if self.momentum >= 1.0:
            raise ConfigError("momentum must be < 1")
        if self.lr_halving_period_iters < 1 or self.minibatch < 1:
            raise ConfigError("period and minibatch must be >= 1")


def lr_at(cfg: SgdConfig, iteration: int) -> float:
    return cfg.learning_rate * 0.5 ** (iteration // cfg.lr_halving_period_iters)


def sgd_step(params, velocities, cfg: SgdConfig, iteration: int):
    """One momentum step: v <- m*v - lr_t*(g + wd*p); p <- p + v."""
    lr = lr_at(cfg, iteration)
    for p, v in zip(params, velocities):
        g = p.grad
        if not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise NonFiniteError(
                f"non-finite gradient ({bad} entries) in parameter of shape {p.shape} "
                f"at iteration {iteration}")
        v *= cfg.momentum
        v -= lr * (g + cfg.weight_decay * p.values)
        p.values += v


class Sgd:
    """Holds per-parameter velocity state around ``sgd_step``."""

    def __init__(self, params, cfg: SgdConfig):
        self.params = list(params)
        self.cfg = cfg
        self.velocities = [np.zeros_like(p.values) for p in self.params]

    def step(self, iteration: int):
        sgd_step(self.params, self.velocities, self.cfg, iteration)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# fused ops for patch-local mean-field inference


def _shifted(a, dy, dx):
    """b[y, x] = a[y+dy, x+dx], zero where out of bounds."""
    H, W = a.shape
    b = np.zeros_like(a)
    yd0, yd1 = max(0, -dy), H - max(0, dy)
    xd0, xd1 = max(0, -dx), W - max(0, dx)
    if yd1 > yd0 and xd1 > xd0:
        b[yd0:yd1, xd0:xd1] = a[yd0 + dy:yd1 + dy, xd0 + dx:xd1 + dx]
    return b


def _pad_zeros(stack, my, mx):
    """Zero-pad the trailing two axes of an [..., H, W] array by (my, mx)."""
    H, W = stack.shape[-2:]
    padded = np.zeros(stack.shape[:-2] + (H + 2 * my, W + 2 * mx))
    padded[..., my:my + H, mx:mx + W] = stack
    return padded


def patch_messages(f_vals: DiffTensor, q: DiffTensor, offsets) -> DiffTensor:
    """Message passing over a fixed offset set.

    m[l][i] = sum_o f_vals[o][i] * q[l][i + o], neighbors outside the image
    contribute zero. f_vals is [O, H, W], q is [L, H, W], offsets an O-list of
    (dy, dx) pairs.
    """
    O, H, W = f_vals.shape
    L = q.shape[0]
    if q.shape[1:] != (H, W) or len(offsets) != O:
        raise ShapeError("patch_messages: inconsistent shapes")
    my = max(abs(dy) for dy, _ in offsets)
    mx = max(abs(dx) for _, dx in offsets)
    fv = f_vals.values
    qpad = _pad_zeros(q.values, my, mx)
    m = np.zeros((L, H, W))
    tmp = np.empty((L, H, W))
    for o, (dy, dx) in enumerate(offsets):
        qview = qpad[:, my + dy:my + dy + H, mx + dx:mx + dx + W]
        np.multiply(fv[o][None, :, :], qview, out=tmp)
        m += tmp
    out = DiffTensor(m, (f_vals, q))

    def back():
        g = out.grad
        df = np.empty((O, H, W))
        dqpad = np.zeros_like(qpad)
        buf = np.empty((L, H, W))
        for o, (dy, dx) in enumerate(offsets):
            qview = qpad[:, my + dy:my + dy + H, mx + dx:mx + dx + W]
            np.einsum("lyx,lyx->yx", g, qview, out=df[o])
            np.multiply(fv[o][None, :, :], g, out=buf)
            dqpad[:, my + dy:my + dy + H, mx + dx:mx + dx + W] += buf
        f_vals._acc(df, own=True)
        q._acc(dqpad[:, my:my + H, mx:mx + W], own=True)

    out._backward = back
    return out


def compat_transform(mu: DiffTensor, m: DiffTensor) -> DiffTensor:
    """out[l] = sum_l' mu[l, l'] * m[l'] over an [L, H, W] message stack."""
    L = m.shape[0]
    if mu.shape != (L, L):
        raise ShapeError(f"compat_transform: mu {mu.shape} vs {L} labels")
    out = DiffTensor(np.tensordot(mu.values, m.values, axes=([1], [0])), (mu, m))

    def back():
        mu._acc(np.tensordot(out.grad, m.values, axes=([1, 2], [1, 2])), own=True)
        m._acc(np.tensordot(mu.values.T, out.grad, axes=([1], [0])), own=True)

    out._backward = back
    return out


def hard_label_overwrite(q: DiffTensor, pixel_labels) -> DiffTensor:
    """Force listed pixels to exact one-hot probabilities.

    pixel_labels is a list of ((y, x), label). Gradients are blocked at the
    overwritten pixels and pass through everywhere else.
    """
    vals = q.values.copy()
    L = q.shape[0]
    ys = np.array([p[0][0] for p in pixel_labels], dtype=np.intp)
    xs = np.array([p[0][1] for p in pixel_labels], dtype=np.intp)
    labs = np.array([p[1] for p in pixel_labels], dtype=np.intp)
    vals[:, ys, xs] = 0.0
    vals[labs, ys, xs] = 1.0
    out = DiffTensor(vals, (q,))

    def back():
        g = out.grad.copy()
        g[:, ys, xs] = 0.0
        q._acc(g, own=True)

    out._backward = back
    return out
