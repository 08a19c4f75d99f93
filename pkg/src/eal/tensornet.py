"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Covers exactly the ops the agent and the attack need: conv2d, relu,
maxpool2x2, linear, gru_cell, softmax, cross_entropy, elementwise
add/mul, reductions, reshape/concat plumbing, and classical-momentum SGD.
All math runs in float64; the on-disk weights format stores float32.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when an op receives incompatible tensor shapes."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class BackwardError(RuntimeError):
    """Raised for invalid backward calls (non-scalar loss, double backward)."""


class Tensor:
    """Dense tensor with an optional tape edge back to its inputs.

    Gradients are kept on every node touched by backward() so callers can
    read gradients of intermediates (the attack needs d/dZ of a cached
    activation, not just leaf gradients).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_op", "_done")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._op = "leaf"
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def tracked(self):
        return self.requires_grad or bool(self._parents)

    def zero_grad(self):
        self.grad = None
        self._done = False

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op})"

    # Operator sugar; the named functions below do the work.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, Tensor(np.array(-1.0)))

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(op: str, data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.tracked for p in parents):
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        out._op = op
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient g down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatchError("add", f"shapes {a.shape} vs {b.shape}")

    def backward(g):
        if a.tracked:
            _accum(a, _unbroadcast(g, a.shape))
        if b.tracked:
            _accum(b, _unbroadcast(g, b.shape))

    return _node("add", data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatchError("mul", f"shapes {a.shape} vs {b.shape}")

    def backward(g):
        if a.tracked:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.tracked:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node("mul", data, (a, b), backward)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def backward(g):
        if x.tracked:
            _accum(x, g * mask)

    return _node("relu", x.data * mask, (x,), backward)


def leaky_relu(x, slope: float = 0.1) -> Tensor:
    """max(x, slope*x): keeps a gradient path through inactive units so conv
    channels cannot die irrecoverably during training."""
    x = _as_tensor(x)
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope)

    def backward(g):
        if x.tracked:
            _accum(x, g * scale)

    return _node("leaky_relu", x.data * scale, (x,), backward)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        if x.tracked:
            _accum(x, g * y * (1.0 - y))

    return _node("sigmoid", y, (x,), backward)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)

    def backward(g):
        if x.tracked:
            _accum(x, g * (1.0 - y * y))

    return _node("tanh", y, (x,), backward)


# ---------------------------------------------------------------- reductions

def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not x.tracked:
            return
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape).copy())

    return _node("sum", data, (x,), backward)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        n = x.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([x.data.shape[a] for a in axis]))
    else:
        n = x.data.shape[axis]
    s = tsum(x, axis=axis, keepdims=keepdims)
    return mul(s, Tensor(np.array(1.0 / n)))


# ---------------------------------------------------------------- linear alg

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", f"shapes {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.tracked:
            _accum(a, g @ b.data.T)
        if b.tracked:
            _accum(b, a.data.T @ g)

    return _node("matmul", data, (a, b), backward)


def linear(x, w, b) -> Tensor:
    """x:(B,I) @ w:(O,I)^T + b:(O,) -> (B,O)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatchError("linear", f"x {x.shape} vs w {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeMismatchError("linear", f"bias {b.shape} vs w {w.shape}")
    return add(matmul(x, transpose(w)), b)


def transpose(x) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        if x.tracked:
            _accum(x, g.T)

    return _node("transpose", x.data.T, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError("reshape", f"{x.shape} -> {shape}")

    def backward(g):
        if x.tracked:
            _accum(x, g.reshape(x.shape))

    return _node("reshape", data, (x,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.tracked:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _node("concat", data, tuple(tensors), backward)


# ---------------------------------------------------------------- conv / pool

def _im2col_indices(c, h, w, kh, kw, stride, pad):
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    i0 = np.repeat(np.arange(kh), kw)
    i0 = np.tile(i0, c)
    i1 = stride * np.repeat(np.arange(oh), ow)
    j0 = np.tile(np.arange(kw), kh * c)
    j1 = stride * np.tile(np.arange(ow), oh)
    i = i0.reshape(-1, 1) + i1.reshape(1, -1)
    j = j0.reshape(-1, 1) + j1.reshape(1, -1)
    k = np.repeat(np.arange(c), kh * kw).reshape(-1, 1)
    return k, i, j, oh, ow


def conv2d(x, w, b, stride=1, pad=0) -> Tensor:
    """x:(B,C,H,W), w:(O,C,kh,kw), b:(O,) -> (B,O,OH,OW)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatchError("conv2d", f"x {x.shape}, w {w.shape}")
    bsz, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeMismatchError("conv2d", f"channels {c} vs kernel {cw}")
    if b.shape != (o,):
        raise ShapeMismatchError("conv2d", f"bias {b.shape} vs out {o}")
    k, i, j, oh, ow = _im2col_indices(c, h, wd, kh, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = xp[:, k, i, j]                       # (B, C*kh*kw, OH*OW)
    wm = w.data.reshape(o, -1)
    out = np.tensordot(cols, wm, axes=([1], [1]))     # (B, L, O)
    out = out.transpose(0, 2, 1) + b.data.reshape(1, o, 1)
    out = out.reshape(bsz, o, oh, ow)

    def backward(g):
        gm = g.reshape(bsz, o, -1)
        if b.tracked:
            _accum(b, gm.sum(axis=(0, 2)))
        if w.tracked:
            gw = np.tensordot(gm, cols, axes=([0, 2], [0, 2]))
            _accum(w, gw.reshape(w.shape))
        if x.tracked:
            gcols = np.tensordot(wm, gm, axes=([0], [1])).transpose(1, 0, 2)
            gxp = np.zeros_like(xp)
            np.add.at(gxp, (slice(None), k, i, j), gcols)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
            _accum(x, gx)

    return _node("conv2d", out, (x, w, b), backward)


def maxpool2x2(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeMismatchError("maxpool2x2", f"x {x.shape}")
    b, c, h, w = x.shape
    win = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        if not x.tracked:
            return
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        _accum(x, gx.reshape(x.shape))

    return _node("maxpool2x2", out, (x,), backward)


# ---------------------------------------------------------------- recurrent

def gru_cell(x, h, w_ih, w_hh, b_ih, b_hh) -> Tensor:
    """One GRU step. x:(B,I), h:(B,H); gate order [reset, update, candidate].

    Built from primitive ops so the backward pass comes from the tape.
    """
    x, h = _as_tensor(x), _as_tensor(h)
    hid = h.shape[1]
    if w_ih.shape != (3 * hid, x.shape[1]) or w_hh.shape != (3 * hid, hid):
        raise ShapeMismatchError(
            "gru_cell", f"x {x.shape}, h {h.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}")
    gi = linear(x, w_ih, b_ih)
    gh = linear(h, w_hh, b_hh)
    gi_r, gi_z, gi_n = _split3(gi, hid)
    gh_r, gh_z, gh_n = _split3(gh, hid)
    r = sigmoid(add(gi_r, gh_r))
    z = sigmoid(add(gi_z, gh_z))
    n = tanh(add(gi_n, mul(r, gh_n)))
    one = Tensor(np.ones_like(z.data))
    return add(mul(add(one, -z), n), mul(z, h))


def _split3(t: Tensor, hid: int):
    return (slice_cols(t, 0, hid), slice_cols(t, hid, 2 * hid),
            slice_cols(t, 2 * hid, 3 * hid))


def gather_rows(x, idx) -> Tensor:
    """Row gather: out[i] = x[idx[i]]. Backward scatter-adds."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        if x.tracked:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            _accum(x, gx)

    return _node("gather_rows", x.data[idx], (x,), backward)


def slice_cols(x, lo, hi) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        if x.tracked:
            gx = np.zeros_like(x.data)
            gx[:, lo:hi] = g
            _accum(x, gx)

    return _node("slice_cols", x.data[:, lo:hi], (x,), backward)


def crop2d(x, y0, y1, x0, x1) -> Tensor:
    """Spatial crop of a (B, C, H, W) tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeMismatchError("crop2d", f"expected 4-d input, got {x.shape}")

    def backward(g):
        if x.tracked:
            gx = np.zeros_like(x.data)
            gx[:, :, y0:y1, x0:x1] = g
            _accum(x, gx)

    return _node("crop2d", x.data[:, :, y0:y1, x0:x1], (x,), backward)


# ---------------------------------------------------------------- heads

def softmax(x, axis=-1) -> Tensor:
    x = _as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.tracked:
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accum(x, y * (g - dot))

    return _node("softmax", y, (x,), backward)


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Weighted mean negative log-likelihood.

    logits: (B, C); targets: int array (B,); weights: optional (B,)
    non-negative per-sample weights (normalized by their sum).
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeMismatchError(
            "cross_entropy", f"logits {logits.shape}, targets {targets.shape}")
    b = logits.shape[0]
    if weights is None:
        w = np.full(b, 1.0 / b)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (b,):
            raise ShapeMismatchError(
                "cross_entropy", f"weights {w.shape}, expected ({b},)")
        w = w / w.sum()
    m = logits.data.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits.data - m).sum(axis=1, keepdims=True))
    nll = lse[:, 0] - logits.data[np.arange(b), targets]
    p = np.exp(logits.data - lse)

    def backward(g):
        if logits.tracked:
            gl = p.copy()
            gl[np.arange(b), targets] -= 1.0
            _accum(logits, g * gl * w[:, None])

    return _node("cross_entropy", np.array(nll @ w), (logits,), backward)


# ---------------------------------------------------------------- backward

def backward(loss: Tensor):
    """Reverse-sweep from a scalar loss, accumulating grads on every node."""
    if loss.data.shape != ():
        raise BackwardError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss._done:
        raise BackwardError("backward called twice on the same loss; "
                            "rebuild the graph or zero_grad first")
    loss._done = True

    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.array(1.0)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------- optimizer

@dataclass
class SgdState:
    """Classical-momentum SGD with weight decay folded into the gradient."""

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def sgd_step(params: dict, grads: dict, state: SgdState):
    """v <- m*v + g + wd*p; p <- p - lr*v, applied in-place per name."""
    for name, p in params.items():
        g = grads[name]
        arr = p.data if isinstance(p, Tensor) else p
        garr = g.data if isinstance(g, Tensor) else np.asarray(g)
        if garr.shape != arr.shape:
            raise ShapeMismatchError("sgd_step", f"{name}: {garr.shape} vs {arr.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(arr)
        v = state.momentum * v + garr + state.weight_decay * arr
        state.velocity[name] = v
        arr -= state.learning_rate * v


# ---------------------------------------------------------------- weights io

_MAGIC = b"EALW1"


class WeightsFormatError(ValueError):
    """Raised for corrupt or mislabeled weights files."""


def save_weights(path, named_arrays: dict, header_tag: str = ""):
    """Binary weights file: magic EALW1, little-endian records, crc32 trailer."""
    buf = bytearray()
    buf += _MAGIC
    tag = header_tag.encode("utf-8")
    buf += struct.pack("<I", len(tag)) + tag
    buf += struct.pack("<I", len(named_arrays))
    for name, arr in named_arrays.items():
        a = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", a.ndim)
        for d in a.shape:
            buf += struct.pack("<I", d)
        buf += a.astype("<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(bytes(buf))


def load_weights(path):
    """Returns (header_tag, dict name -> float64 array). Verifies the crc."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(_MAGIC) + 4 or raw[:len(_MAGIC)] != _MAGIC:
        raise WeightsFormatError(f"{path}: bad magic")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise WeightsFormatError(f"{path}: checksum mismatch")
    off = len(_MAGIC)

    def take(n):
        nonlocal off
        chunk = body[off:off + n]
        off += n
        return chunk

    (tag_len,) = struct.unpack("<I", take(4))
    tag = take(tag_len).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims)
        out[name] = arr.astype(np.float64)
    return tag, out
