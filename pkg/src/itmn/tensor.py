"""4-D tensors with tape-based reverse-mode automatic differentiation.

Everything the networks differentiate through lives here: convolution and
its transpose, batch normalization, activations, channel concatenation,
elementwise arithmetic and reductions. Values are numpy arrays in
(batch, channel, height, width) layout; float32 is the training precision,
float64 exists for gradient checking.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# When True, every Tensor constructor scans for NaN/Inf. Off by default
# (costs a full pass per op); the test suite switches it on.
CHECK_FINITE = False


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class Tensor:
    """Immutable-by-convention dense array of shape (n, c, h, w)."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are 4-D (n, c, h, w); got shape {arr.shape}")
        if CHECK_FINITE and not np.isfinite(arr).all():
            raise ValueError("tensor contains non-finite values")
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same values with no grad tracking."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def scalar(value: float, dtype=np.float64) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

@dataclass
class TapeNode:
    op: str
    inputs: tuple[Optional[int], ...]
    # backward_fn(grad_out, needs) -> one gradient array (or None) per input.
    backward_fn: Optional[Callable]
    out: Tensor  # also keeps registered tensors alive so id() keys stay unique


class Tape:
    """Recorded computation; nodes are appended in execution order, which is
    by construction a topological order. Confined to one logical thread."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._ids: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def node_of(self, t: Tensor) -> Optional[int]:
        return self._ids.get(id(t))

    def leaf_ids(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.op == "leaf"]

    def _leaf(self, t: Tensor) -> Optional[int]:
        nid = self._ids.get(id(t))
        if nid is not None:
            return nid
        if not t.requires_grad:
            return None
        nid = len(self.nodes)
        self.nodes.append(TapeNode("leaf", (), None, t))
        self._ids[id(t)] = nid
        return nid

    def grad_for(self, grads: dict[int, Tensor], t: Tensor) -> Optional[Tensor]:
        nid = self.node_of(t)
        return None if nid is None else grads.get(nid)


# The active-tape stack; a None entry suspends recording (see pause_recording).
_ACTIVE: list[Optional[Tape]] = []


def _active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


class pause_recording:
    """Context manager that suspends recording on any enclosing tape."""

    def __enter__(self):
        _ACTIVE.append(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False


def _emit(op: str, inputs: Sequence[Tensor], out: Tensor, backward_fn) -> Tensor:
    tape = _active_tape()
    if tape is None:
        return out
    ids = tuple(tape._leaf(t) for t in inputs)
    if all(i is None for i in ids):
        return out
    tape._ids[id(out)] = len(tape.nodes)
    tape.nodes.append(TapeNode(op, ids, backward_fn, out))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Reverse sweep from a scalar loss; returns {leaf node id: gradient}.

    Every requires_grad leaf registered on the tape gets an entry (zeros if
    the loss does not depend on it). The sweep visits each node exactly once,
    in reverse recording order, and does not consume the tape: backward may
    be called repeatedly, on different loss nodes.
    """
    loss_id = tape.node_of(loss)
    if loss_id is None:
        raise ValueError("loss tensor is not recorded on this tape")
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward needs a scalar loss of shape (1,1,1,1), got {loss.shape}")

    acc: dict[int, np.ndarray] = {loss_id: np.ones((1, 1, 1, 1), dtype=loss.dtype)}
    for i in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[i]
        if node.backward_fn is None:
            continue
        g = acc.pop(i, None)
        if g is None:
            continue
        needs = tuple(j is not None for j in node.inputs)
        for j, gin in zip(node.inputs, node.backward_fn(g, needs)):
            if j is None or gin is None:
                continue
            have = acc.get(j)
            acc[j] = gin if have is None else have + gin

    out: dict[int, Tensor] = {}
    for i in tape.leaf_ids():
        leaf = tape.nodes[i].out
        g = acc.get(i)
        out[i] = Tensor(g) if g is not None else Tensor(np.zeros_like(leaf.data))
    return out


# --------------------------------------------------------------------------
# Convolution
# --------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, oh, ow), dtype=xp.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, ky, kx] = xp[:, :, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride]
    return cols.reshape(n, c * k * k, oh * ow)


def _col2im(cols: np.ndarray, n: int, c: int, hp: int, wp: int,
            k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, k, k, oh, ow)
    for ky in range(k):
        for kx in range(k):
            out[:, :, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride] += cols6[:, :, ky, kx]
    return out


def _check_bias(b: Optional[Tensor], channels: int, who: str):
    if b is not None and b.shape != (1, channels, 1, 1):
        raise ShapeError(f"{who}: bias shape {b.shape} does not match (1,{channels},1,1)")


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Strided cross-correlation (no kernel flip).

    x: (n, c_in, h, w); w: (c_out, c_in, k, k); b: (1, c_out, 1, 1) or None.
    Output spatial dims are floor((dim + 2*pad - k)/stride) + 1.
    """
    n, c_in, h, wd = x.shape
    c_out, c_w, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"conv2d: only square kernels supported, got weight {w.shape}")
    if c_in != c_w:
        raise ShapeError(f"conv2d: input shape {x.shape} has {c_in} channels but weight "
                         f"{w.shape} expects {c_w}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    if k > h + 2 * pad or k > wd + 2 * pad:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded input {h + 2 * pad}x{wd + 2 * pad}")
    _check_bias(b, c_out, "conv2d")

    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, oh, ow)
    wf = w.data.reshape(c_out, -1)
    out = np.matmul(wf, cols).reshape(n, c_out, oh, ow)
    if b is not None:
        out = out + b.data
    res = Tensor(out)

    def bw(g: np.ndarray, needs):
        gf = g.reshape(n, c_out, oh * ow)
        gx = gw = gb = None
        if needs[0]:
            gcols = np.matmul(wf.T, gf)
            gxp = _col2im(gcols, n, c_in, h + 2 * pad, wd + 2 * pad, k, stride, oh, ow)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        if needs[1]:
            gw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2, 3)).reshape(1, c_out, 1, 1)
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv2d", inputs, res, bw)


def conv2d_transpose(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
                     stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of conv2d with the same weight layout.

    With shared w, <conv2d(a), y> == <a, conv2d_transpose(y)> exactly.
    x: (n, c_out, h, w); w: (c_out, c_dst, k, k); output (n, c_dst, H, W)
    with H = (h-1)*stride - 2*pad + k.
    """
    n, c_src, h, wd = x.shape
    c_w, c_dst, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"conv2d_transpose: only square kernels supported, got weight {w.shape}")
    if c_src != c_w:
        raise ShapeError(f"conv2d_transpose: input shape {x.shape} has {c_src} channels but "
                         f"weight {w.shape} expects {c_w}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d_transpose: stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    H = (h - 1) * stride - 2 * pad + k
    W = (wd - 1) * stride - 2 * pad + k
    if H < 1 or W < 1:
        raise ShapeError(f"conv2d_transpose: output dims {H}x{W} collapse for input {x.shape}")
    _check_bias(b, c_dst, "conv2d_transpose")

    xf = x.data.reshape(n, c_src, h * wd)
    wf = w.data.reshape(c_src, c_dst * k * k)
    cols = np.matmul(wf.T, xf)
    outp = _col2im(cols, n, c_dst, H + 2 * pad, W + 2 * pad, k, stride, h, wd)
    out = outp[:, :, pad:pad + H, pad:pad + W] if pad else outp
    if b is not None:
        out = out + b.data
    res = Tensor(out)

    def bw(g: np.ndarray, needs):
        gx = gw = gb = None
        if needs[0] or needs[1]:
            gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
            gcols = _im2col(gp, k, stride, h, wd)
            if needs[0]:
                gx = np.matmul(wf, gcols).reshape(x.shape)
            if needs[1]:
                gw = np.matmul(xf, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2, 3)).reshape(1, c_dst, 1, 1)
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv2d_transpose", inputs, res, bw)


# --------------------------------------------------------------------------
# Batch normalization
# --------------------------------------------------------------------------

@dataclass
class BatchNormState:
    gamma: Tensor                 # (1, c, 1, 1), learnable
    beta: Tensor                  # (1, c, 1, 1), learnable
    running_mean: np.ndarray      # (c,)
    running_var: np.ndarray       # (c,)
    momentum: float = 0.9
    epsilon: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape[1]
        if self.beta.shape != (1, c, 1, 1):
            raise ShapeError("batchnorm: gamma/beta channel counts differ")
        if self.running_mean.shape != (c,) or self.running_var.shape != (c,):
            raise ShapeError("batchnorm: running stats length must equal channel count")
        if np.any(self.running_var < 0):
            raise ValueError("batchnorm: running_var must be nonnegative")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("batchnorm: momentum must lie in (0,1)")
        if self.epsilon <= 0:
            raise ValueError("batchnorm: epsilon must be positive")

    @property
    def channels(self) -> int:
        return self.gamma.shape[1]

    @classmethod
    def create(cls, channels: int, dtype=DEFAULT_DTYPE, momentum: float = 0.9,
               epsilon: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )


def batchnorm(x: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalization over (n, h, w).

    Train mode normalizes with batch statistics and updates the running
    stats by exponential moving average; eval mode uses the running stats.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm: mode must be 'train' or 'eval', got {mode!r}")
    n, c, h, wd = x.shape
    if c != state.channels:
        raise ShapeError(f"batchnorm: input has {c} channels, state expects {state.channels}")
    eps = state.epsilon
    gamma, beta = state.gamma, state.beta
    m = n * h * wd

    if mode == "train":
        if m == 1:
            raise ValueError("batchnorm: train mode needs more than one value per channel "
                             "(n*h*w == 1 leaves the variance undefined)")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        mom = state.momentum
        state.running_mean = (mom * state.running_mean + (1.0 - mom) * mu).astype(x.dtype)
        state.running_var = (mom * state.running_var + (1.0 - mom) * var).astype(x.dtype)
    else:
        mu = state.running_mean
        var = state.running_var

    mu4 = mu.reshape(1, c, 1, 1)
    inv_std = 1.0 / np.sqrt(var.reshape(1, c, 1, 1) + eps)
    xc = x.data - mu4
    xhat = xc * inv_std
    res = Tensor(gamma.data * xhat + beta.data)

    if mode == "train":
        def bw(g: np.ndarray, needs):
            gx = ggamma = gbeta = None
            if needs[0]:
                dxhat = g * gamma.data
                dvar = (dxhat * xc).sum(axis=(0, 2, 3), keepdims=True) * (-0.5) * inv_std ** 3
                dmu = -dxhat.sum(axis=(0, 2, 3), keepdims=True) * inv_std
                gx = dxhat * inv_std + dvar * 2.0 * xc / m + dmu / m
            if needs[1]:
                ggamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
            if needs[2]:
                gbeta = g.sum(axis=(0, 2, 3), keepdims=True)
            return gx, ggamma, gbeta
    else:
        def bw(g: np.ndarray, needs):
            gx = g * gamma.data * inv_std if needs[0] else None
            ggamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True) if needs[1] else None
            gbeta = g.sum(axis=(0, 2, 3), keepdims=True) if needs[2] else None
            return gx, ggamma, gbeta

    return _emit("batchnorm", (x, gamma, beta), res, bw)


# --------------------------------------------------------------------------
# Activations
# --------------------------------------------------------------------------

def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data >= 0
    res = Tensor(np.where(pos, x.data, slope * x.data))

    def bw(g, needs):
        return (np.where(pos, g, slope * g),)

    return _emit("leaky_relu", (x,), res, bw)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)
    res = Tensor(out)

    def bw(g, needs):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", (x,), res, bw)


def activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation kind {kind!r}")


# --------------------------------------------------------------------------
# Structure ops
# --------------------------------------------------------------------------

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"concat_channels: shapes {a.shape} and {b.shape} disagree outside "
                         "the channel axis")
    res = Tensor(np.concatenate([a.data, b.data], axis=1))

    def bw(g, needs):
        ga = g[:, :ca] if needs[0] else None
        gb = g[:, ca:] if needs[1] else None
        return ga, gb

    return _emit("concat_channels", (a, b), res, bw)


def channel_slice(x: Tensor, c0: int, c1: int) -> Tensor:
    n, c, h, w = x.shape
    if not 0 <= c0 < c1 <= c:
        raise ShapeError(f"channel_slice: [{c0}:{c1}] out of range for {c} channels")
    res = Tensor(x.data[:, c0:c1].copy())

    def bw(g, needs):
        gx = np.zeros_like(x.data)
        gx[:, c0:c1] = g
        return (gx,)

    return _emit("channel_slice", (x,), res, bw)


def spatial_slice(x: Tensor, r0: int, r1: int, c0: int, c1: int) -> Tensor:
    n, c, h, w = x.shape
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise ShapeError(f"spatial_slice: window [{r0}:{r1}, {c0}:{c1}] out of range for "
                         f"{h}x{w}")
    res = Tensor(x.data[:, :, r0:r1, c0:c1].copy())

    def bw(g, needs):
        gx = np.zeros_like(x.data)
        gx[:, :, r0:r1, c0:c1] = g
        return (gx,)

    return _emit("spatial_slice", (x,), res, bw)


def fc(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Fully connected layer over the flattened (c, h, w) features.

    w: (width, c*h*w, 1, 1); output (n, width, 1, 1).
    """
    n, c, h, wd = x.shape
    width, in_f, k1, k2 = w.shape
    if (k1, k2) != (1, 1) or in_f != c * h * wd:
        raise ShapeError(f"fc: weight {w.shape} does not match flattened input "
                         f"({c}*{h}*{wd}={c * h * wd} features)")
    _check_bias(b, width, "fc")
    xf = x.data.reshape(n, in_f)
    wf = w.data.reshape(width, in_f)
    out = xf @ wf.T
    if b is not None:
        out = out + b.data.reshape(1, width)
    res = Tensor(out.reshape(n, width, 1, 1))

    def bw(g, needs):
        gf = g.reshape(n, width)
        gx = (gf @ wf).reshape(x.shape) if needs[0] else None
        gw = (gf.T @ xf).reshape(w.shape) if needs[1] else None
        gb = None
        if len(needs) > 2 and needs[2]:
            gb = gf.sum(axis=0).reshape(1, width, 1, 1)
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("fc", inputs, res, bw)


# --------------------------------------------------------------------------
# Elementwise arithmetic and reductions
# --------------------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, who: str):
    if a.shape != b.shape:
        raise ShapeError(f"{who}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    res = Tensor(a.data + b.data)
    return _emit("add", (a, b), res, lambda g, needs: (g if needs[0] else None,
                                                       g if needs[1] else None))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    res = Tensor(a.data - b.data)
    return _emit("sub", (a, b), res, lambda g, needs: (g if needs[0] else None,
                                                       -g if needs[1] else None))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    res = Tensor(a.data * b.data)

    def bw(g, needs):
        return (g * b.data if needs[0] else None,
                g * a.data if needs[1] else None)

    return _emit("mul", (a, b), res, bw)


def scale(x: Tensor, k: float) -> Tensor:
    res = Tensor(x.data * k)
    return _emit("scale", (x,), res, lambda g, needs: (g * k,))


def add_const(x: Tensor, c: float) -> Tensor:
    res = Tensor(x.data + c)
    return _emit("add_const", (x,), res, lambda g, needs: (g,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log: all inputs must be positive (clamp first)")
    res = Tensor(np.log(x.data))

    def bw(g, needs):
        return (g / x.data,)

    return _emit("log", (x,), res, bw)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    if lo >= hi:
        raise ValueError(f"clamp: lo {lo} must be below hi {hi}")
    res = Tensor(np.clip(x.data, lo, hi))
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g, needs):
        return (np.where(inside, g, 0.0),)

    return _emit("clamp", (x,), res, bw)


def sum_all(x: Tensor) -> Tensor:
    res = Tensor(np.full((1, 1, 1, 1), x.data.sum(), dtype=x.dtype))

    def bw(g, needs):
        return (np.full(x.shape, float(g.reshape(())), dtype=x.dtype),)

    return _emit("sum_all", (x,), res, bw)


def mean_all(x: Tensor) -> Tensor:
    inv = 1.0 / x.data.size
    res = Tensor(np.full((1, 1, 1, 1), x.data.mean(), dtype=x.dtype))

    def bw(g, needs):
        return (np.full(x.shape, float(g.reshape(())) * inv, dtype=x.dtype),)

    return _emit("mean_all", (x,), res, bw)
