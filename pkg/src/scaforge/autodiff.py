"""Dense tensors with reverse-mode automatic differentiation.

Everything is float64 and unbatched unless noted. Ops record parent links
only when an input participates in gradient tracking, so inference-only
forward passes build no graph. Gradients w.r.t. marked inputs (not just
parameters) are first-class: adversarial crafting depends on them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


# Per-op finite checks cost ~20% of training time; they are opt-in for
# debugging. Divergence is still caught cheaply at the loss/gradient level
# (see extraction.train and crafting._trace_gradient).
ANOMALY_CHECKS = False


def set_anomaly_checks(enabled: bool) -> None:
    global ANOMALY_CHECKS
    ANOMALY_CHECKS = bool(enabled)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """A dense float64 array plus optional gradient-tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or bool(_parents)
        self._parents: tuple[Tensor, ...] = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars and ndarrays are lifted to constant tensors.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if ANOMALY_CHECKS:
        _check_finite(data, op)
    if any(p.requires_grad for p in parents):
        return Tensor(data, _parents=parents, _vjp=vjp)
    return Tensor(data)


def _accumulate(t: Tensor, g) -> None:
    if t.grad is None:
        if getattr(g, "shape", None) == t.data.shape:
            t.grad = g.copy()
            return
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar loss into .grad of all leaves."""
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is detached from any traced graph")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if parent.requires_grad and g is not None:
                _accumulate(parent, g)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts a 1-D bias against the last axis."""
    if a.shape != b.shape:
        if b.data.ndim == 0:
            return _make(a.data + b.data, "add", (a, b),
                         lambda g: (g, g.sum()))
        if a.data.ndim == 0:
            return _make(a.data + b.data, "add", (a, b),
                         lambda g: (g.sum(), g))
        if b.data.ndim == 1 and a.shape and a.shape[-1] == b.shape[0]:
            out = a.data + b.data
            lead = tuple(range(a.data.ndim - 1))

            def vjp(g):
                return g, g.sum(axis=lead) if lead else g

            return _make(out, "add", (a, b), vjp)
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def vjp(g):
        ga = g * b.data
        gb = g * a.data
        if a.data.ndim == 0:
            ga = ga.sum()
        if b.data.ndim == 0:
            gb = gb.sum()
        return ga, gb

    return _make(out, "mul", (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, "matmul", (a, b), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    orig = a.shape
    return _make(out, "reshape", (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.shape}")
    return _make(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, "concat", tuple(tensors), vjp)


def slice_(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(out, "slice", (a,), vjp)


def gather(a: Tensor, indices) -> Tensor:
    """Pick one entry per row along the last axis: out[i] = a[i, indices[i]]."""
    indices = np.asarray(indices, dtype=np.int64)
    if a.data.ndim != 2 or indices.ndim != 1 or indices.shape[0] != a.shape[0]:
        raise ShapeError(f"gather: {a.shape} with indices {indices.shape}")
    rows = np.arange(a.shape[0])
    out = a.data[rows, indices]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, indices), g)
        return (full,)

    return _make(out, "gather", (a,), vjp)


def sum_(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.full_like(a.data, g),)
        return (np.expand_dims(g, axis) * np.ones_like(a.data),)

    return _make(out, "sum", (a,), vjp)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis), Tensor(1.0 / n))


# ---------------------------------------------------------------------------
# convolutions and pooling
# ---------------------------------------------------------------------------

def _conv1d_windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # x: (C, T) -> (T_out, C, k)
    c, t = x.shape
    t_out = (t - k) // stride + 1
    idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
    return x[:, idx].transpose(1, 0, 2)


def conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution (cross-correlation): x (C_in, T), w (C_out, C_in, K)."""
    if x.data.ndim != 2 or w.data.ndim != 3 or x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv1d: x {x.shape}, w {w.shape}")
    c_in, t = x.shape
    c_out, _, k = w.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding))) if padding else x.data
    if xp.shape[1] < k:
        raise ShapeError(f"conv1d: input length {xp.shape[1]} < kernel {k}")
    cols = _conv1d_windows(xp, k, stride)  # (T_out, C_in, K)
    t_out = cols.shape[0]
    out = cols.reshape(t_out, -1) @ w.data.reshape(c_out, -1).T  # (T_out, C_out)
    out = out.T  # (C_out, T_out)

    def vjp(g):
        # g: (C_out, T_out)
        gw = (g @ cols.reshape(t_out, -1)).reshape(w.shape)
        gcols = g.T @ w.data.reshape(c_out, -1)  # (T_out, C_in*K)
        gx = np.zeros_like(xp)
        idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
        gcols = gcols.reshape(t_out, c_in, k)
        np.add.at(gx, (slice(None), idx.ravel()),
                  gcols.transpose(1, 0, 2).reshape(c_in, -1))
        if padding:
            gx = gx[:, padding:gx.shape[1] - padding]
        return gx, gw

    return _make(out, "conv1d", (x, w), vjp)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    # x: (N, C, H, W) -> (N, H_out, W_out, C*kh*kw)
    n, c, h, w = x.shape
    h_out = (h - kh) // stride + 1
    w_out = (w - kw) // stride + 1
    s = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, h_out, w_out, kh, kw),
        strides=(s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3]),
        writeable=False,
    )
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, h_out, w_out, c * kh * kw)
    return np.ascontiguousarray(cols), h_out, w_out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution: x (N, C_in, H, W), w (C_out, C_in, KH, KW)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: x {x.shape}, w {w.shape}")
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: spatial {xp.shape[2:]} < kernel ({kh},{kw})")
    cols, h_out, w_out = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(c_out, -1)
    out = cols @ wmat.T  # (N, H_out, W_out, C_out)
    out = out.transpose(0, 3, 1, 2)

    def vjp(g):
        gt = g.transpose(0, 2, 3, 1)  # (N, H_out, W_out, C_out)
        gw = np.tensordot(gt, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(w.shape)
        gcols = gt @ wmat  # (N, H_out, W_out, C_in*kh*kw)
        gx = np.zeros_like(xp)
        gcols = gcols.reshape(n, h_out, w_out, c_in, kh, kw)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + h_out * stride:stride, j:j + w_out * stride:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if padding:
            gx = gx[:, :, padding:gx.shape[2] - padding, padding:gx.shape[3] - padding]
        return gx, gw

    return _make(out, "conv2d", (x, w), vjp)


def max_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k max pooling over x (N, C, H, W)."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d: x {x.shape}")
    n, c, h, w = x.shape
    h_out, w_out = h // k, w // k
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"max_pool2d: {h}x{w} too small for kernel {k}")
    trimmed = x.data[:, :, :h_out * k, :w_out * k]
    blocks = trimmed.reshape(n, c, h_out, k, w_out, k).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h_out, w_out, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, :h_out * k, :w_out * k] = (
            gflat.reshape(n, c, h_out, w_out, k, k)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h_out * k, w_out * k)
        )
        return (gx,)

    return _make(out, "max_pool2d", (x,), vjp)


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------

@dataclass
class GRUParams:
    """Weights for one GRU direction: update z, reset r, candidate h."""
    wz: Tensor
    uz: Tensor
    bz: Tensor
    wr: Tensor
    ur: Tensor
    br: Tensor
    wh: Tensor
    uh: Tensor
    bh: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.wz, self.uz, self.bz, self.wr, self.ur, self.br,
                self.wh, self.uh, self.bh]

    @staticmethod
    def init(input_dim: int, hidden: int, rng: np.random.Generator) -> "GRUParams":
        def w(rows, cols):
            scale = 1.0 / math.sqrt(rows)
            return Tensor(rng.uniform(-scale, scale, size=(rows, cols)),
                          requires_grad=True)

        def b(cols):
            return Tensor(np.zeros(cols), requires_grad=True)

        return GRUParams(
            wz=w(input_dim, hidden), uz=w(hidden, hidden), bz=b(hidden),
            wr=w(input_dim, hidden), ur=w(hidden, hidden), br=b(hidden),
            wh=w(input_dim, hidden), uh=w(hidden, hidden), bh=b(hidden),
        )


def gru_cell(x: Tensor, h: Tensor, p: GRUParams) -> Tensor:
    """One GRU step; x (1, D), h (1, H) -> (1, H)."""
    z = sigmoid(add(add(matmul(x, p.wz), matmul(h, p.uz)), p.bz))
    r = sigmoid(add(add(matmul(x, p.wr), matmul(h, p.ur)), p.br))
    cand = tanh(add(add(matmul(x, p.wh), matmul(mul(r, h), p.uh)), p.bh))
    one = Tensor(np.ones_like(z.data))
    return add(mul(add(one, neg(z)), h), mul(z, cand))


def _gru_direction(seq: Tensor, p: GRUParams, hidden: int,
                   reverse: bool) -> list[Tensor]:
    """One GRU direction with the input projections hoisted out of the loop."""
    t = seq.shape[0]
    xz = add(matmul(seq, p.wz), p.bz)
    xr = add(matmul(seq, p.wr), p.br)
    xh = add(matmul(seq, p.wh), p.bh)
    h = Tensor(np.zeros((1, hidden)))
    out: list[Tensor] = [None] * t  # type: ignore[list-item]
    order = range(t - 1, -1, -1) if reverse else range(t)
    for i in order:
        z = sigmoid(add(slice_(xz, i, i + 1), matmul(h, p.uz)))
        r = sigmoid(add(slice_(xr, i, i + 1), matmul(h, p.ur)))
        cand = tanh(add(slice_(xh, i, i + 1), matmul(mul(r, h), p.uh)))
        one = Tensor(np.ones_like(z.data))
        h = add(mul(add(one, neg(z)), h), mul(z, cand))
        out[i] = h
    return out


def bigru(seq: Tensor, fw: GRUParams, bw: GRUParams, hidden: int) -> Tensor:
    """Bidirectional GRU over seq (T, D); returns (T, 2*hidden)."""
    t = seq.shape[0]
    fwd = _gru_direction(seq, fw, hidden, reverse=False)
    bwd = _gru_direction(seq, bw, hidden, reverse=True)
    rows = [concat([fwd[i], bwd[i]], axis=1) for i in range(t)]
    return concat(rows, axis=0)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment buffers, keyed by parameter position."""
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """In-place Adam update of params from grads."""
    if len(params) != len(grads):
        raise ShapeError("adam_step: params/grads length mismatch")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


class Adam:
    """Convenience wrapper binding an AdamState to a fixed parameter list."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        adam_step(self.params, grads, self.state, self.lr,
                  self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params)
