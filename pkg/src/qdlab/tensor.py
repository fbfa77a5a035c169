"""Minimal reverse-mode autodiff over dense numpy tensors.

Supports exactly what small quantized convnets need: conv2d, batchnorm,
clamped activations, a dense head, cross-entropy, and elementwise/matrix
arithmetic for regularizers. Gradients flow to weights and to inputs, so
gradient-based input perturbations use the same backward path as training.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not compose."""


class TapeError(RuntimeError):
    """Backward misuse: re-entry, or loss not attached to a live tape."""


class GradState(threading.local):
    def __init__(self):
        self.enabled = True
        self.tape: Optional[Tape] = None


_state = GradState()


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / attacks' eval)."""
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def grad_enabled() -> bool:
    return _state.enabled


class Tensor:
    """Dense n-d float tensor with optional gradient tracking.

    data is float32 by default; float64 is supported for high-precision
    checks. Tensors are value-immutable by convention: only optimizer steps
    mutate .data in place.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detached(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar used when assembling losses
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


class Node:
    """One executed op: inputs, output, and the backward closure."""

    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name, inputs, output, backward_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Execution record of one forward pass, consumed by a single backward.

    Nodes are appended in execution order, so inputs always precede their
    consumers. Running backward twice over the same record is an error.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def record(self, node: Node):
        if self.consumed:
            raise TapeError("recording onto a consumed tape")
        self.nodes.append(node)


def _current_tape() -> Tape:
    if _state.tape is None or _state.tape.consumed:
        _state.tape = Tape()
    return _state.tape


def apply_op(name: str,
             inputs: Sequence[Tensor],
             out_data: np.ndarray,
             backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap a computed result as a tracked tensor.

    backward_fn maps the output gradient to per-input gradients (None for
    inputs that need none). Recording only happens when grad mode is on and
    some input is tracked; otherwise the result is a plain constant.
    """
    track = _state.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape = _current_tape()
        tape.record(Node(name, tuple(inputs), out, backward_fn))
        out._tape = tape
    return out


def backward(loss: Tensor):
    """Populate grads of every tracked tensor contributing to a scalar loss.

    Walks the recording tape in reverse execution order. The tape is
    consumed: a second backward over the same forward pass raises TapeError.
    Tensors not on the path keep grad=None.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is not attached to a recorded forward pass")
    if tape.consumed:
        raise TapeError("backward already ran for this forward pass")
    tape.consumed = True
    if _state.tape is tape:
        _state.tape = None

    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g_out = node.output.grad
        if g_out is None:
            continue
        grads = node.backward_fn(g_out)
        for t, g in zip(node.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.array(g, dtype=t.data.dtype, copy=True)
            else:
                t.grad += g
    tape.nodes.clear()  # drop saved activations promptly


# ---------------------------------------------------------------------------
# elementwise / shape ops


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to a broadcast operand's shape (scalars only here)."""
    if grad.shape == shape:
        return grad
    if shape == () or all(d == 1 for d in shape):
        return grad.sum().reshape(shape)
    raise ShapeError(f"cannot reduce grad {grad.shape} to {shape}")


def _check_broadcast(a: Tensor, b: Tensor):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"operands {a.shape} and {b.shape} are neither equal-shape nor scalar")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = a.data + b.data

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return apply_op("add", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return apply_op("mul", (a, b), out, bwd)


def neg(a: Tensor) -> Tensor:
    return apply_op("neg", (a,), -a.data, lambda g: (-g,))


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape = a.shape

    def bwd(g):
        return (np.broadcast_to(g, shape).copy(),)

    return apply_op("sum", (a,), a.data.sum(dtype=a.data.dtype).reshape(()), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return apply_op("reshape", (a,), a.data.reshape(shape), bwd)


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) dimension."""
    return reshape(a, (a.shape[0], -1))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")
    return apply_op("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape} do not compose")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return apply_op("matmul", (a, b), ad @ bd, bwd)


def clamp_range(a: Tensor, max_val: float) -> Tensor:
    """Elementwise clamp to [0, max_val]; ReLU6 is clamp_range(x, 6).

    Subgradient is 1 strictly inside (0, max_val) and 0 elsewhere, including
    the two kinks.
    """
    ad = a.data
    out = np.minimum(np.maximum(ad, 0), ad.dtype.type(max_val))
    mask = ((ad > 0) & (ad < max_val)).astype(ad.dtype)

    def bwd(g):
        return (g * mask,)

    return apply_op("clamp_range", (a,), out, bwd)


def relu6(a: Tensor) -> Tensor:
    return clamp_range(a, 6.0)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return apply_op("tanh", (a,), out, bwd)


# ---------------------------------------------------------------------------
# neural-net ops


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """Patch matrix (N*Ho*Wo, C*k*k), built in its final layout in one pass."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, ho, wo, c, k, k), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            src = xp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride]
            cols[:, :, :, :, a, b] = src.transpose(0, 2, 3, 1)
    return cols.reshape(n * ho * wo, c * k * k), ho, wo


def _col2im(cols: np.ndarray, x_shape, k: int, stride: int, pad: int):
    """Scatter-add the patch-matrix gradient back onto the input shape."""
    n, c, h, w = x_shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols6 = cols.reshape(n, ho, wo, c, k, k)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for a in range(k):
        for b in range(k):
            dst = xp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride]
            dst += cols6[:, :, :, :, a, b].transpose(0, 3, 1, 2)
    return xp[:, :, pad:pad + h, pad:pad + w] if pad else xp


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW input against (Cout, Cin, k, k) weight."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_w, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"conv2d kernels must be square, got {w.shape}")
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if k > h + 2 * pad or k > wd + 2 * pad:
        raise ShapeError(f"kernel {k} exceeds padded input {h + 2 * pad}x{wd + 2 * pad}")

    cols, ho, wo = _im2col(x.data, k, stride, pad)
    w_mat = w.data.reshape(cout, -1)
    out = (cols @ w_mat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    x_shape = x.shape
    need_x, need_w = x.requires_grad, w.requires_grad

    def bwd(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (g_mat.T @ cols).reshape(cout, cin, k, k) if need_w else None
        gx = _col2im(g_mat @ w_mat, x_shape, k, stride, pad) if need_x else None
        return gx, gw

    return apply_op("conv2d", (x, w), np.ascontiguousarray(out), bwd)


class BatchNormState:
    """Running statistics for one batchnorm, one slot per channel."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              training: bool) -> Tensor:
    """Per-channel batch normalization over an NCHW (or NC) tensor.

    Train mode normalizes by batch statistics and folds them into the
    running estimates with the state's momentum; eval mode normalizes by the
    running estimates. Fresh states (mean 0, var 1) make eval-before-train a
    near identity rather than an error.
    """
    c = x.shape[1]
    if gamma.size != c or beta.size != c:
        raise ShapeError(f"batchnorm affine params must have {c} channels")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    xd = x.data
    eps = xd.dtype.type(state.eps)

    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = state.momentum
        state.running_mean = (m * state.running_mean + (1 - m) * mean).astype(state.running_mean.dtype)
        state.running_var = (m * state.running_var + (1 - m) * var).astype(state.running_var.dtype)
    else:
        mean = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    m_count = xd.size // c
    need_x, need_g, need_b = x.requires_grad, gamma.requires_grad, beta.requires_grad

    def bwd(g):
        gg = (g * xhat).sum(axis=axes) if (need_g or need_x) else None
        gb = g.sum(axis=axes) if (need_b or need_x) else None
        g_gamma = gg if need_g else None
        g_beta = gb if need_b else None
        if not need_x:
            return None, g_gamma, g_beta
        gam = gamma.data.reshape(bshape)
        if training:
            # d/dx of batch-stat normalization: couple through mean and var
            gx = (gam * inv_std.reshape(bshape) / m_count) * (
                m_count * g - gb.reshape(bshape) - xhat * gg.reshape(bshape))
        else:
            gx = g * gam * inv_std.reshape(bshape)
        return gx, g_gamma, g_beta

    return apply_op("batchnorm", (x, gamma, beta), out, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dims: (N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects an NCHW tensor, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    scale = 1.0 / (h * w)

    def bwd(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], (n, c, h, w)).astype(g.dtype),)

    return apply_op("global_avg_pool", (x,), out, bwd)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: (N, D) @ (K, D)^T + (K,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense shapes {x.shape} x {w.shape} do not compose")
    if b.size != w.shape[0]:
        raise ShapeError(f"dense bias must have {w.shape[0]} entries, got {b.size}")
    xd, wd = x.data, w.data
    out = xd @ wd.T + b.data
    need_x, need_w, need_b = x.requires_grad, w.requires_grad, b.requires_grad

    def bwd(g):
        gx = g @ wd if need_x else None
        gw = g.T @ xd if need_w else None
        gb = g.sum(axis=0) if need_b else None
        return gx, gw, gb

    return apply_op("dense", (x, w, b), out, bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class, max-shifted for stability."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, C) logits, got {logits.shape}")
    y = np.asarray(labels)
    n, c = logits.shape
    if y.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"label out of range [0, {c})")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    loss = (-logp[np.arange(n), y]).mean(dtype=z.dtype)

    softmax = np.exp(logp)

    def bwd(g):
        grad = softmax.copy()
        grad[np.arange(n), y] -= 1.0
        return (grad * (g / n),)

    return apply_op("cross_entropy", (logits,), np.asarray(loss, dtype=z.dtype).reshape(()), bwd)


# ---------------------------------------------------------------------------
# optimizer


def sgd_momentum_step(params: Iterable[Tensor], grads: Iterable[np.ndarray],
                      lr: float, momentum: float, velocity: list[np.ndarray]):
    """Classic momentum update, in place: v <- m*v + g; p <- p - lr*v."""
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        velocity[i] *= momentum
        velocity[i] += g
        p.data -= np.asarray(lr, dtype=p.data.dtype) * velocity[i]


class SGD:
    """Momentum-SGD over a fixed parameter list, with per-step lr override."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: Optional[float] = None):
        grads = [p.grad for p in self.params]
        sgd_momentum_step(self.params, grads, self.lr if lr is None else lr,
                          self.momentum, self.velocity)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
