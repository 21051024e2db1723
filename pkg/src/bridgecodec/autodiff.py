"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps a float32 (or, for gradient checking, float64) ndarray.
Operations executed while a ``Tape`` is active append a backward closure for
every output that needs gradients; ``Tape.backward`` replays the records in
reverse recording order, which is a reverse topological order of the graph,
and accumulates gradient buffers keyed by node id.

Training state is float32 throughout; float64 graphs are supported solely so
the finite-difference checks in :mod:`bridgecodec.gradcheck` can run at full
precision.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import kernels
from .errors import ShapeMismatchError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Immutable-by-convention array node in the computation graph."""

    __slots__ = ("data", "requires_grad", "node_id")
    _ids = itertools.count()

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else np.float32
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = np.asarray(arr, dtype=dtype) if arr.ndim == 0 else np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(Tensor._ids)

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

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Records executed ops and holds gradient buffers keyed by node id."""

    def __init__(self):
        self._records = []  # (output node_id, backward closure), append order = topo order
        self.grads: dict[int, np.ndarray] = {}

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def _acc(self, tensor: Tensor, g: np.ndarray):
        if not tensor.requires_grad:
            return
        buf = self.grads.get(tensor.node_id)
        if buf is None:
            self.grads[tensor.node_id] = g.copy()
        else:
            buf += g

    def backward(self, loss: Tensor):
        """Backpropagate from a scalar loss; each record is visited exactly once."""
        if loss.data.shape != ():
            raise ShapeMismatchError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        self.grads[loss.node_id] = np.ones((), dtype=loss.data.dtype)
        for node_id, backward in reversed(self._records):
            g = self.grads.get(node_id)
            if g is not None:
                backward(g, self)

    def grad(self, tensor: Tensor):
        return self.grads.get(tensor.node_id)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._records.append((out.node_id, backward))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` along broadcast axes."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _contig(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a)


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g, tape):
        tape._acc(a, _unbroadcast(g, a.data.shape))
        tape._acc(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g, tape):
        tape._acc(a, _unbroadcast(g, a.data.shape))
        tape._acc(b, -_unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g, tape):
        tape._acc(a, _unbroadcast(g * b.data, a.data.shape))
        tape._acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * a.data.dtype.type(s)

    def backward(g, tape):
        tape._acc(a, g * a.data.dtype.type(s))

    return _make(out, (a,), backward)


def add_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Add a non-learnable constant (e.g. an attention mask); broadcast to a's shape."""
    out = a.data + np.asarray(c, dtype=a.data.dtype)
    if out.shape != a.data.shape:
        raise ShapeMismatchError(f"add_const changed shape {a.data.shape} -> {out.shape}")

    def backward(g, tape):
        tape._acc(a, g)

    return _make(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def backward(g, tape):
        tape._acc(a, g * (a.data > 0))

    return _make(out, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    out = kernels.gelu_fwd(x)

    def backward(g, tape):
        tape._acc(a, kernels.gelu_bwd(x, _contig(g)))

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g, tape):
        tape._acc(a, g.reshape(a.data.shape))

    return _make(out, (a,), backward)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.swapaxes(a.data, ax1, ax2)

    def backward(g, tape):
        tape._acc(a, _contig(np.swapaxes(g, ax1, ax2)))

    return _make(out, (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g, tape):
        offsets = np.cumsum([0] + sizes)
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            tape._acc(t, _contig(g[tuple(idx)]))

    return _make(out, tuple(tensors), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis if axis >= 0 else a.data.ndim + axis
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx]

    def backward(g, tape):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        tape._acc(a, buf)

    return _make(out, (a,), backward)


def pad_time_zero(a: Tensor, pad: int) -> Tensor:
    """Zero-pad `pad` frames on the right of the time axis (second-to-last)."""
    if pad == 0:
        return a
    width = [(0, 0)] * a.data.ndim
    width[-2] = (0, pad)
    out = np.pad(a.data, width)
    t = a.data.shape[-2]

    def backward(g, tape):
        tape._acc(a, _contig(g[..., :t, :]))

    return _make(out, (a,), backward)


def pad_time_edge(a: Tensor, pad: int) -> Tensor:
    """Replicate the final frame `pad` times on the right of the time axis."""
    if pad == 0:
        return a
    width = [(0, 0)] * a.data.ndim
    width[-2] = (0, pad)
    out = np.pad(a.data, width, mode="edge")
    t = a.data.shape[-2]

    def backward(g, tape):
        gx = np.array(g[..., :t, :])
        gx[..., t - 1, :] += g[..., t:, :].sum(axis=-2)
        tape._acc(a, gx)

    return _make(out, (a,), backward)


def straight_through(a: Tensor, value: np.ndarray) -> Tensor:
    """Forward `value`, backward identity into `a` (gradient copied through)."""
    value = np.asarray(value, dtype=a.data.dtype)
    if value.shape != a.data.shape:
        raise ShapeMismatchError(f"straight_through value shape {value.shape} != input {a.data.shape}")

    def backward(g, tape):
        tape._acc(a, g)

    return _make(value, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum()

    def backward(g, tape):
        tape._acc(a, np.full_like(a.data, g))

    return _make(out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = a.data.mean()

    def backward(g, tape):
        tape._acc(a, np.full_like(a.data, g / n))

    return _make(out, (a,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared elementwise difference; shapes must match exactly."""
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"mse shape mismatch: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    out = np.mean(diff * diff)
    n = diff.size

    def backward(g, tape):
        d = diff * (2.0 * g / n)
        tape._acc(a, d.astype(a.data.dtype))
        tape._acc(b, (-d).astype(b.data.dtype))

    return _make(out, (a, b), backward)


def softmax(a: Tensor) -> Tensor:
    """Numerically stabilized softmax over the last axis."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g, tape):
        dot = (g * p).sum(axis=-1, keepdims=True)
        tape._acc(a, (p * (g - dot)).astype(a.data.dtype))

    return _make(p, (a,), backward)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean of -log softmax(logits)[target] over rows, stabilized by max-subtraction."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.data.shape[0]:
        raise ShapeMismatchError(
            f"softmax_cross_entropy expects (N,K) logits and (N,) targets, got {logits.data.shape} and {targets.shape}"
        )
    n, k = logits.data.shape
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= k:
        raise ValueError(f"target out of range [0, {k})")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = (x - m) - np.log(z)
    out = -logp[np.arange(n), targets].mean()

    def backward(g, tape):
        grad = e / z
        grad[np.arange(n), targets] -= 1.0
        tape._acc(logits, (grad * (g / n)).astype(logits.data.dtype))

    return _make(out.astype(x.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """np.matmul with matching batch dims (or plain 2-D operands)."""
    if a.data.ndim != b.data.ndim or (a.data.ndim > 2 and a.data.shape[:-2] != b.data.shape[:-2]):
        raise ShapeMismatchError(f"matmul batch dims must match: {a.data.shape} vs {b.data.shape}")
    out = a.data @ b.data

    def backward(g, tape):
        tape._acc(a, _contig(g @ np.swapaxes(b.data, -1, -2)))
        tape._acc(b, _contig(np.swapaxes(a.data, -1, -2) @ g))

    return _make(out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: (..., Din) @ (Din, Dout) + (Dout,)."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeMismatchError(f"linear: input {x.data.shape} incompatible with weight {w.data.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g, tape):
        gf = g.reshape(-1, g.shape[-1])
        xf = x.data.reshape(-1, x.data.shape[-1])
        tape._acc(w, xf.T @ gf)
        tape._acc(x, _contig((g @ w.data.T).reshape(x.data.shape)))
        if b is not None:
            tape._acc(b, gf.sum(axis=0))

    return _make(out, parents, backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: (V, E) table indexed by an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def backward(g, tape):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        tape._acc(table, gt)

    return _make(out, (table,), backward)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds into place."""
    idx = np.asarray(idx, dtype=np.int64)
    out = x.data[idx]

    def backward(g, tape):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        tape._acc(x, gx)

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def backward(g, tape):
        gy = g * gain.data
        m1 = gy.mean(axis=-1, keepdims=True)
        m2 = (gy * xhat).mean(axis=-1, keepdims=True)
        tape._acc(x, ((gy - m1 - xhat * m2) * inv).astype(x.data.dtype))
        red = tuple(range(g.ndim - 1))
        tape._acc(gain, (g * xhat).sum(axis=red))
        tape._acc(bias, g.sum(axis=red))

    return _make(out.astype(x.data.dtype), (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# 1-D convolutions
# ---------------------------------------------------------------------------


def _conv_padding(k: int, padding: str):
    if padding == "same":
        left = (k - 1) // 2
        return left, k - 1 - left
    if padding == "valid":
        return 0, 0
    raise ValueError(f"unknown padding mode {padding!r}")


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation along time. x (T,Cin) or (B,T,Cin); w (k,Cin,Cout).

    Output length is floor((T + pad - k)/stride) + 1.
    """
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    k, ci, co = w.data.shape
    if xd.shape[2] != ci:
        raise ShapeMismatchError(f"conv1d: input shape {x.data.shape} has {xd.shape[2]} channels, kernel {w.data.shape} expects {ci}")
    left, right = _conv_padding(k, padding)
    xp = _contig(np.pad(xd, ((0, 0), (left, right), (0, 0))))
    out = kernels.conv1d_fwd(xp, w.data, stride)
    if b is not None:
        out = out + b.data
    t_in = xd.shape[1]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g, tape):
        g3 = _contig(g[None] if squeeze else g)
        tape._acc(w, kernels.conv1d_bwd_kernel(xp, g3, stride, k))
        gxp = kernels.conv1d_bwd_input(g3, w.data, stride, xp.shape[1])
        gx = gxp[:, left : left + t_in, :]
        tape._acc(x, _contig(gx[0] if squeeze else gx))
        if b is not None:
            tape._acc(b, g3.sum(axis=(0, 1)))

    return _make(out[0] if squeeze else out, parents, backward)


def conv1d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Transposed conv along time: output length (T-1)*stride + k."""
    squeeze = x.data.ndim == 2
    xd = _contig(x.data[None] if squeeze else x.data)
    k, ci, co = w.data.shape
    if xd.shape[2] != ci:
        raise ShapeMismatchError(f"conv1d_transpose: input shape {x.data.shape} has {xd.shape[2]} channels, kernel {w.data.shape} expects {ci}")
    out = kernels.convt1d_fwd(xd, w.data, stride)
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g, tape):
        g3 = _contig(g[None] if squeeze else g)
        tape._acc(w, kernels.convt1d_bwd_kernel(xd, g3, stride, k))
        gx = kernels.convt1d_bwd_input(g3, w.data, stride)
        tape._acc(x, gx[0] if squeeze else gx)
        if b is not None:
            tape._acc(b, g3.sum(axis=(0, 1)))

    return _make(out[0] if squeeze else out, parents, backward)
