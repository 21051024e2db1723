"""Parameterized layers built on the autodiff ops.

Layers create their parameters from an explicit numpy Generator so model
construction is fully deterministic for a given seed. `Module.named_params`
walks attributes (tensors, sub-modules, lists of either) in insertion order,
which fixes the parameter ordering used by the optimizer and checkpoints.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Minimal parameter container; subclasses assign Tensors / Modules as attributes."""

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            self._collect(name, value, out)
        return out

    def _collect(self, prefix, value, out):
        if isinstance(value, Tensor):
            out[prefix] = value
        elif isinstance(value, Module):
            for sub, t in value.named_params().items():
                out[f"{prefix}.{sub}"] = t
        elif isinstance(value, (list, tuple)):
            for i, item in enumerate(value):
                self._collect(f"{prefix}.{i}", item, out)

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def set_requires_grad(self, flag: bool):
        for p in self.params():
            p.requires_grad = flag

    def load_state(self, blobs: dict[str, np.ndarray], prefix: str = ""):
        for name, p in self.named_params().items():
            key = prefix + name
            if key not in blobs:
                raise KeyError(f"missing parameter blob {key!r}")
            arr = blobs[key]
            if arr.shape != p.data.shape:
                raise ValueError(f"blob {key!r} shape {arr.shape} != parameter shape {p.data.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)


def _param(rng: np.random.Generator, shape, std: float) -> Tensor:
    if std == 0.0:
        data = np.zeros(shape, dtype=np.float32)
    else:
        data = rng.normal(0.0, std, size=shape).astype(np.float32)
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero_init: bool = False, bias: bool = True):
        std = 0.0 if zero_init else 1.0 / np.sqrt(d_in)
        self.w = _param(rng, (d_in, d_out), std)
        self.b = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.w, self.b)


class Conv1d(Module):
    def __init__(self, k: int, c_in: int, c_out: int, rng: np.random.Generator,
                 stride: int = 1, padding: str = "same", zero_init: bool = False):
        std = 0.0 if zero_init else 1.0 / np.sqrt(k * c_in)
        self.w = _param(rng, (k, c_in, c_out), std)
        self.b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class ConvTranspose1d(Module):
    def __init__(self, k: int, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 1):
        self.w = _param(rng, (k, c_in, c_out), 1.0 / np.sqrt(c_in))
        self.b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d_transpose(x, self.w, self.b, stride=self.stride)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, eps=self.eps)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator):
        self.table = _param(rng, (n, dim), 1.0 / np.sqrt(dim))

    def __call__(self, ids) -> Tensor:
        return ad.embedding(self.table, ids)


_NEG_INF = np.float32(-1e9)


def causal_mask(t: int) -> np.ndarray:
    """(t, t) additive mask: 0 on/below the diagonal, -inf-ish above (no future)."""
    m = np.zeros((t, t), dtype=np.float32)
    m[np.triu_indices(t, k=1)] = _NEG_INF
    return m


class CausalSelfAttention(Module):
    """Multi-head self-attention with a strict causal (no-future) mask."""

    def __init__(self, width: int, n_heads: int, rng: np.random.Generator):
        assert width % n_heads == 0
        self.wq = Linear(width, width, rng)
        self.wk = Linear(width, width, rng)
        self.wv = Linear(width, width, rng)
        self.wo = Linear(width, width, rng)
        self.n_heads = n_heads
        self.head_dim = width // n_heads

    def _split(self, x: Tensor, b: int, t: int) -> Tensor:
        # (B,T,W) -> (B,H,T,hd)
        return ad.swapaxes(ad.reshape(x, (b, t, self.n_heads, self.head_dim)), 1, 2)

    def __call__(self, x: Tensor) -> Tensor:
        b, t, w = x.shape
        q = self._split(self.wq(x), b, t)
        k = self._split(self.wk(x), b, t)
        v = self._split(self.wv(x), b, t)
        scores = ad.matmul(q, ad.swapaxes(k, 2, 3))
        scores = ad.scale(scores, 1.0 / np.sqrt(self.head_dim))
        scores = ad.add_const(scores, causal_mask(t)[None, None, :, :])
        attn = ad.softmax(scores)
        out = ad.matmul(attn, v)  # (B,H,T,hd)
        out = ad.reshape(ad.swapaxes(out, 1, 2), (b, t, w))
        return self.wo(out)


class TransformerBlock(Module):
    """Pre-norm decoder block: attention + GELU MLP, both residual."""

    def __init__(self, width: int, n_heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(width)
        self.attn = CausalSelfAttention(width, n_heads, rng)
        self.ln2 = LayerNorm(width)
        self.fc1 = Linear(width, mlp_ratio * width, rng)
        self.fc2 = Linear(mlp_ratio * width, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.add(x, self.attn(self.ln1(x)))
        return ad.add(x, self.fc2(ad.gelu(self.fc1(self.ln2(x)))))
